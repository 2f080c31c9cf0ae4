//! Margin-based PAC-Bayes certificates for weighted majority votes.
//!
//! The crate evaluates generalisation bounds for `f_θ(x) = argmax_k Σ_{h_i(x)=k} θ_i`
//! through Dirichlet proxies of the weight vector, trains θ by minimising a
//! differentiable certificate, and ships Monte Carlo oracles that check the
//! probabilistic statements the bounds rest on.

pub mod numkern;
pub mod votes;
pub mod bounds;
pub mod data;
pub mod voters;
pub mod train;
pub mod oracle;
pub mod cli;

use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numkern::NumError),
    #[error(transparent)]
    Votes(#[from] votes::VotesError),
    #[error(transparent)]
    Bound(#[from] bounds::BoundError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Voters(#[from] voters::VotersError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Cli(#[from] cli::CliError),
}
