//! Flow-matching laboratory for weak-to-strong guidance on 2D class-conditional
//! Gaussian mixtures.
//!
//! The crate is organised bottom-up:
//!
//! * [`mixture`] builds the recursive toy mixtures, samples datasets and evaluates
//!   (noised) log densities.
//! * [`oracle`] computes exact optimal velocities and guidance-error curves.
//! * [`net`] is the conditional residual MLP with hand-written backprop and Adam.
//! * [`train`] runs flow-matching training with the weak-to-strong target variants.
//! * [`guidance`] and [`sampler`] assemble guided velocities and integrate them.
//! * [`metrics`] turns sample batches into outlier / coverage / accuracy numbers.
//! * [`runner`] holds config files, manifests, CSV/SVG emission and the repro pipeline.

pub mod guidance;
pub mod metrics;
pub mod mixture;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod train;

pub use nalgebra::{Matrix2, Vector2};

/// A point or velocity in the plane.
pub type Vec2 = Vector2<f64>;
/// A 2×2 real matrix.
pub type Mat2 = Matrix2<f64>;

/// Class condition: `Some(class)` or `None` for the null token.
pub type Condition = Option<usize>;

/// A batched velocity field `v(x_t, t, c)` sharing one `t` across the batch.
pub trait VelocityField {
    fn velocity_batch(&self, xs: &[Vec2], t: f64, conds: &[Condition]) -> Vec<Vec2>;

    fn velocity(&self, x: Vec2, t: f64, cond: Condition) -> Vec2 {
        self.velocity_batch(&[x], t, &[cond])[0]
    }
}

impl<F> VelocityField for F
where
    F: Fn(Vec2, f64, Condition) -> Vec2,
{
    fn velocity_batch(&self, xs: &[Vec2], t: f64, conds: &[Condition]) -> Vec<Vec2> {
        xs.iter().zip(conds).map(|(x, c)| self(*x, t, *c)).collect()
    }
}
