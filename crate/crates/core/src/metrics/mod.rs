//! PSNR evaluation and layer-similarity analysis.

mod cka;
mod psnr;

pub use cka::{cka_profile, dissimilarity_ratios, linear_cka, CkaProfile, CKA_THRESHOLD};
pub use psnr::{denoise, evaluate, format_db, psnr, EvalRow, EvalTable, EVAL_HEADER};
