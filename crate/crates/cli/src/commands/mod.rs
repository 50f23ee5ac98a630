pub mod caption;
pub mod demo;
pub mod evaluate;
pub mod gen_corpus;
pub mod train;
