//! Residual functions and analytic Jacobians for the three factor kinds:
//! max-mixture detection, constant velocity, and repelling.

use nalgebra::{DMatrix, DVector, Matrix6, Matrix6x3, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::graph::VariableId;
use crate::scalar::Real;
use crate::types::GaussianMixture;

/// Guard radius for the repelling factor's singularity at zero distance.
pub const EPS_REP: f64 = 1e-3;

/// Whitened residual values plus one Jacobian block per connected variable.
#[derive(Debug, Clone)]
pub struct Residual<T: Real> {
    pub values: DVector<T>,
    /// `d residual / d variable`, one `m x 3` block per connected variable,
    /// in the factor's variable order.
    pub jacobians: Vec<DMatrix<T>>,
}

impl<T: Real> Residual<T> {
    pub fn squared_norm(&self) -> T {
        self.values.norm_squared()
    }
}

/// Max-mixture detection factor over one position variable.
#[derive(Debug, Clone)]
pub struct DetectionFactor<T: Real> {
    pub mixture: GaussianMixture<T>,
    pub frame: usize,
    pub var: VariableId,
}

/// Constant-velocity factor linking consecutive states of one track.
#[derive(Debug, Clone)]
pub struct CvFactor<T: Real> {
    /// 6x6 whitening matrix derived from the constant-velocity covariance.
    pub sqrt_info: Matrix6<T>,
    pub dt: T,
    /// `[pos_t, vel_t, pos_t1, vel_t1]`.
    pub vars: [VariableId; 4],
}

/// Inverse-distance factor between the positions of two distinct tracks.
#[derive(Debug, Clone)]
pub struct RepellingFactor<T: Real> {
    /// Scalar whitening, `1 / sqrt(repelling variance)`.
    pub sqrt_info: T,
    /// Position variables of the two tracks, same frame.
    pub vars: [VariableId; 2],
}

/// Squared norm of mixture component `j` at `pos`: the weight-row term plus
/// the whitened position distance.
fn component_sq_norm<T: Real>(
    mixture: &GaussianMixture<T>,
    gamma: T,
    j: usize,
    pos: &Vector3<T>,
) -> Result<(T, Vector3<T>)> {
    let comp = &mixture.components()[j];
    if comp.scaled_weight <= T::zero() {
        return Err(Error::InvalidComponent);
    }
    // c_j <= gamma, so the log term is non-negative up to rounding.
    let mut weight_sq = -T::of(2.0) * (comp.scaled_weight / gamma).ln();
    if weight_sq < T::zero() {
        weight_sq = T::zero();
    }
    let whitened = comp.sqrt_info * (pos - comp.mean);
    Ok((weight_sq + whitened.norm_squared(), whitened))
}

/// Selects the dominant mixture component at `pos`: the index minimizing the
/// candidate squared norm, ties resolved to the lowest index.
pub fn select_component<T: Real>(mixture: &GaussianMixture<T>, pos: &Vector3<T>) -> Result<usize> {
    let gamma = mixture.max_scaled_weight();
    let mut best = 0usize;
    let mut best_sq = T::max_value().unwrap();
    for j in 0..mixture.len() {
        let (sq, _) = component_sq_norm(mixture, gamma, j, pos)?;
        if sq < best_sq {
            best_sq = sq;
            best = j;
        }
    }
    Ok(best)
}

/// Evaluates the detection factor with the component held at `j`.
///
/// The weight row is constant within one linearization, so its Jacobian row
/// is zero; the position rows carry the component's sqrt information.
pub fn eval_detection_fixed<T: Real>(
    factor: &DetectionFactor<T>,
    pos: &Vector3<T>,
    j: usize,
) -> Result<Residual<T>> {
    let gamma = factor.mixture.max_scaled_weight();
    let (sq, whitened) = component_sq_norm(&factor.mixture, gamma, j, pos)?;
    let weight_row = (sq - whitened.norm_squared()).max(T::zero()).sqrt();

    let mut values = DVector::zeros(4);
    values[0] = weight_row;
    values.rows_mut(1, 3).copy_from(&whitened);

    let mut jac = DMatrix::zeros(4, 3);
    jac.view_mut((1, 0), (3, 3))
        .copy_from(&factor.mixture.components()[j].sqrt_info);

    Ok(Residual {
        values,
        jacobians: vec![jac],
    })
}

/// Evaluates the max-mixture detection residual at `pos`, re-selecting the
/// dominant component. Returns the residual and the selected index.
pub fn eval_detection<T: Real>(
    factor: &DetectionFactor<T>,
    pos: &Vector3<T>,
) -> Result<(Residual<T>, usize)> {
    let j = select_component(&factor.mixture, pos)?;
    Ok((eval_detection_fixed(factor, pos, j)?, j))
}

/// Evaluates the constant-velocity residual.
///
/// The unwhitened error is `[(pos_t1 - pos_t) - vel_t * dt ; vel_t - vel_t1]`:
/// zero exactly when the pair of states continues straight-line motion.
pub fn eval_cv<T: Real>(
    factor: &CvFactor<T>,
    pos_t: &Vector3<T>,
    vel_t: &Vector3<T>,
    pos_t1: &Vector3<T>,
    vel_t1: &Vector3<T>,
) -> Residual<T> {
    let e_pos = (pos_t1 - pos_t) - vel_t * factor.dt;
    let e_vel = vel_t - vel_t1;

    let mut unwhitened = Vector6::zeros();
    unwhitened.fixed_rows_mut::<3>(0).copy_from(&e_pos);
    unwhitened.fixed_rows_mut::<3>(3).copy_from(&e_vel);
    let whitened = factor.sqrt_info * unwhitened;
    let values = DVector::from_column_slice(whitened.as_slice());

    // d e / d var as 6x3 blocks, whitened by the sqrt information.
    let mut blocks = [Matrix6x3::zeros(); 4];
    let one = T::one();
    for k in 0..3 {
        blocks[0][(k, k)] = -one; // pos_t
        blocks[1][(k, k)] = -factor.dt; // vel_t, position rows
        blocks[1][(k + 3, k)] = one; // vel_t, velocity rows
        blocks[2][(k, k)] = one; // pos_t1
        blocks[3][(k + 3, k)] = -one; // vel_t1
    }
    let jacobians = blocks
        .into_iter()
        .map(|b| {
            let whitened = factor.sqrt_info * b;
            DMatrix::from_column_slice(6, 3, whitened.as_slice())
        })
        .collect();

    Residual { values, jacobians }
}

/// Evaluates the repelling residual `1 / distance`, whitened.
///
/// Below the singularity guard the residual is clamped at `EPS_REP` with a
/// zero Jacobian; the returned flag reports the clamp for solver diagnostics.
pub fn eval_repelling<T: Real>(
    factor: &RepellingFactor<T>,
    pos_n: &Vector3<T>,
    pos_m: &Vector3<T>,
) -> (Residual<T>, bool) {
    let eps = T::of(EPS_REP);
    let delta = pos_n - pos_m;
    let dist = delta.norm();

    if dist <= eps {
        let values = DVector::from_element(1, factor.sqrt_info / eps);
        return (
            Residual {
                values,
                jacobians: vec![DMatrix::zeros(1, 3), DMatrix::zeros(1, 3)],
            },
            true,
        );
    }

    let values = DVector::from_element(1, factor.sqrt_info / dist);
    // d (s / |delta|) / d pos_n = -s * delta^T / |delta|^3
    let scale = -factor.sqrt_info / (dist * dist * dist);
    let mut jac_n = DMatrix::zeros(1, 3);
    let mut jac_m = DMatrix::zeros(1, 3);
    for k in 0..3 {
        jac_n[(0, k)] = scale * delta[k];
        jac_m[(0, k)] = -scale * delta[k];
    }
    (
        Residual {
            values,
            jacobians: vec![jac_n, jac_m],
        },
        false,
    )
}

/// Any of the three factor kinds, for generic evaluation and checking.
#[derive(Debug, Clone)]
pub enum Factor<T: Real> {
    Detection(DetectionFactor<T>),
    Cv(CvFactor<T>),
    Repelling(RepellingFactor<T>),
}

impl<T: Real> Factor<T> {
    pub fn vars(&self) -> &[VariableId] {
        match self {
            Factor::Detection(f) => std::slice::from_ref(&f.var),
            Factor::Cv(f) => &f.vars,
            Factor::Repelling(f) => &f.vars,
        }
    }

    /// Evaluates at the given variable values (ordered as [`Factor::vars`]).
    pub fn eval(&self, states: &[Vector3<T>]) -> Result<Residual<T>> {
        match self {
            Factor::Detection(f) => Ok(eval_detection(f, &states[0])?.0),
            Factor::Cv(f) => Ok(eval_cv(f, &states[0], &states[1], &states[2], &states[3])),
            Factor::Repelling(f) => Ok(eval_repelling(f, &states[0], &states[1]).0),
        }
    }

    /// As [`Factor::eval`] but with a detection factor's component forced,
    /// which keeps the residual differentiable around the evaluation point.
    fn eval_with_selection(&self, states: &[Vector3<T>], selection: usize) -> Result<Residual<T>> {
        match self {
            Factor::Detection(f) => eval_detection_fixed(f, &states[0], selection),
            _ => self.eval(states),
        }
    }
}

/// Compares analytic Jacobians against central differences with the given
/// step; returns the maximum relative error over all entries.
///
/// For detection factors the component is selected once at `states` and held
/// fixed across perturbations.
pub fn jacobian_check<T: Real>(factor: &Factor<T>, states: &[Vector3<T>], step: T) -> Result<T> {
    assert_eq!(states.len(), factor.vars().len(), "one state per variable");
    let selection = match factor {
        Factor::Detection(f) => select_component(&f.mixture, &states[0])?,
        _ => 0,
    };
    let base = factor.eval_with_selection(states, selection)?;
    let rows = base.values.len();

    let mut max_err = T::zero();
    for (vi, analytic) in base.jacobians.iter().enumerate() {
        for k in 0..3 {
            let mut plus = states.to_vec();
            plus[vi][k] += step;
            let r_plus = factor.eval_with_selection(&plus, selection)?;
            let mut minus = states.to_vec();
            minus[vi][k] -= step;
            let r_minus = factor.eval_with_selection(&minus, selection)?;
            for row in 0..rows {
                let numeric = (r_plus.values[row] - r_minus.values[row]) / (T::of(2.0) * step);
                let a = analytic[(row, k)];
                let denom = T::one().max(a.abs());
                let err = (a - numeric).abs() / denom;
                if err > max_err {
                    max_err = err;
                }
            }
        }
    }
    Ok(max_err)
}
