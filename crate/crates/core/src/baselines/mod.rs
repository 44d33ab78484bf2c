//! Baseline patient representations: TF-IDF bags of words, LSA and LDA.

mod lda;
mod svd;
mod tfidf;

pub use lda::{fit_lda, lda_represent, read_lda, write_lda, LdaConfig, LdaModel, TopicPooling};
pub use svd::{
    lsa_represent, read_lsa, truncated_svd, write_lsa, DenseMatrix, LinearOperator, LsaModel, TermPatientMatrix,
};
pub use tfidf::{select_vocabulary, tfidf_represent, TfidfModel};
