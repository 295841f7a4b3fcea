//! Convex subproblem solvers: weighted Lasso, restricted least squares, graphical Lasso with
//! elementwise penalty weights, and the de-biased Lasso.

mod debias;
mod glasso;
mod lasso;

pub use debias::{debiased_lasso, two_sided_p, DebiasConfig, DebiasResult, DebiasedDesign, MStrategy};
pub use glasso::{glasso, glasso_kkt_residual, glasso_objective, GlassoProblem, GlassoSolution};
pub use lasso::{
    lasso_cd, lasso_kkt_residual, ols_from_gram, ols_or_ridge_from_gram, ols_restricted, LassoProblem,
    LassoSolution,
};
