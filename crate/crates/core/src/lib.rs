pub mod autodiff;
pub mod decoding;
pub mod editsim;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod paraphrase;
pub mod text;
pub mod training;
