//! Checks shared by the fuzz targets and the corpus replay test. Every
//! entry point must reject bad input without panicking, and whatever it
//! accepts must survive a write/read round trip.

use quickedit::editsim::{parse_jsonl, to_jsonl};
use quickedit::evaluation::SyntheticTaskSpec;
use quickedit::model::Model;
use quickedit::paraphrase::MarkerModel;
use quickedit::text::{BpeModel, Vocabulary};
use quickedit::training::TrainConfig;
use quickedit_cli::service::{parse_edit_request, parse_paraphrase_request};

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn vocab(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(v) = Vocabulary::parse(t) else { return false };
    assert_eq!(Vocabulary::parse(&v.to_file_string()).unwrap(), v);
    for (i, tok) in v.ordinary().iter().enumerate() {
        assert_eq!(v.id(tok), Some(i + 4));
    }
    true
}

pub fn merges(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(m) = BpeModel::parse(t) else { return false };
    assert_eq!(BpeModel::parse(&m.to_file_string()).unwrap().merges(), m.merges());
    if let Some(word) = t.split_whitespace().next() {
        let pieces = m.split_word(word);
        assert_eq!(pieces.concat(), word);
    }
    true
}

pub fn edit_triples(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(triples) = parse_jsonl(t) else { return false };
    for x in &triples {
        assert_eq!(x.guess.len(), x.markers.len());
    }
    assert_eq!(parse_jsonl(&to_jsonl(&triples)).unwrap(), triples);
    true
}

pub fn checkpoint(data: &[u8]) -> bool {
    let Ok(m) = Model::from_bytes(data) else { return false };
    let bytes = m.to_bytes();
    assert_eq!(Model::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    assert!(m.params.check_layout(&m.network.layout).is_ok());
    true
}

pub fn marker_tsv(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(m) = MarkerModel::parse_tsv(t) else { return false };
    assert_eq!(MarkerModel::parse_tsv(&m.to_tsv()).unwrap(), m);
    true
}

pub fn train_config(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(c) = TrainConfig::parse(t) else { return false };
    assert_eq!(TrainConfig::parse(&c.to_file_string()).unwrap(), c);
    true
}

pub fn task_config(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(s) = SyntheticTaskSpec::parse(t) else { return false };
    assert_eq!(SyntheticTaskSpec::parse(&s.to_file_string()).unwrap(), s);
    true
}

pub fn edit_request(data: &[u8]) -> bool {
    let Ok(r) = parse_edit_request(data) else { return false };
    assert!(r.beam.is_none_or(|b| b >= 1));
    true
}

pub fn paraphrase_request(data: &[u8]) -> bool {
    let Ok(r) = parse_paraphrase_request(data) else { return false };
    assert!((0.0..=1.0).contains(&r.tau));
    true
}
