//! Multistep question answering by chaining sub-questions, trained with
//! latent sub-answers.

pub mod harness;
pub mod latent;
pub mod numexec;
pub mod objectives;
pub mod policy;
pub mod qdmr;
pub mod text;
