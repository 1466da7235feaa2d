//! Finite-difference validation of the autodiff engine.
//!
//! Analytic gradients are only trustworthy if they agree with an oracle
//! that knows nothing about the backward pass. This module provides that
//! oracle: central finite differences over randomly generated graph
//! programs, for both first-order gradients and gradients-of-gradients.
//! The same checks back the `selfcheck` CLI subcommand and a pile of tests.
//!
//! Finite differences are exact only in the limit; near a relu kink the
//! two-sided difference straddles the non-smooth point and disagrees with
//! any subgradient convention. Generated programs therefore track their
//! margin to the nearest kink and are re-rolled (deterministically) when an
//! evaluation point is too close for the chosen step size.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::autodiff::{Graph, Result, Shape, Tensor, VarHandle};

/// Relative error with an absolute floor of 1, so tiny values compare
/// absolutely and large values compare relatively.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Central finite difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `at`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut point = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Shapes of the differentiable leaves of a [`RandomProgram`].
#[derive(Clone, Debug)]
struct LeafSpec {
    shapes: Vec<Shape>,
}

impl LeafSpec {
    fn total_len(&self) -> usize {
        self.shapes.iter().map(|s| s.numel()).sum()
    }
}

/// A randomly generated scalar-valued graph program.
///
/// The program is a small stack of dense layers with relu in between,
/// plus side branches that exercise the rest of the op set: elementwise
/// products of overlapping slices, a guarded exp/log/reciprocal chain, a
/// softmax cross-entropy head, and an outer/matmul block. Rebuilding the
/// graph from a flat leaf vector makes the whole thing a plain function
/// `R^n -> R`, which is exactly what a finite-difference oracle needs.
pub struct RandomProgram {
    leaf: LeafSpec,
    layer_dims: Vec<usize>,
    input_dim: usize,
    ce_target: usize,
    base_point: Vec<f64>,
}

/// Everything a program evaluation reports: the scalar value and how close
/// the evaluation came to a relu kink.
struct ProgramEval {
    value: f64,
    kink_margin: f64,
    grads: Option<Vec<f64>>,
    hvp: Option<Vec<f64>>,
}

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Clone, Copy, Debug)]
pub struct CheckReport {
    /// Worst relative error across all compared coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub coords: usize,
}

impl RandomProgram {
    /// Deterministically generate a program from a seed. Dimensions stay at
    /// or below `max_dim` and the dense stack at or below `max_depth`
    /// layers. The evaluation point is generated along with the program and
    /// re-rolled until it clears the kink margin for step size `h`.
    pub fn generate(seed: u64, max_dim: usize, max_depth: usize, h: f64) -> Self {
        let mut salt = 0u64;
        loop {
            let mut rng = StdRng::seed_from_u64(seed.wrapping_add(salt.wrapping_mul(0x9e3779b97f4a7c15)));
            let input_dim = rng.random_range(2..=max_dim.max(2));
            let depth = rng.random_range(1..=max_depth.max(1));
            let mut layer_dims = Vec::with_capacity(depth);
            let mut prev = input_dim;
            let mut shapes = vec![Shape::Vector(input_dim)];
            for _ in 0..depth {
                let next = rng.random_range(2..=max_dim.max(2));
                shapes.push(Shape::Matrix { rows: next, cols: prev });
                shapes.push(Shape::Vector(next));
                layer_dims.push(next);
                prev = next;
            }
            // The outer/matmul side block uses two fixed-size matrices.
            shapes.push(Shape::Matrix { rows: 2, cols: 3 });
            shapes.push(Shape::Matrix { rows: 3, cols: 2 });
            let leaf = LeafSpec { shapes };
            let base_point: Vec<f64> =
                (0..leaf.total_len()).map(|_| rng.random_range(-1.2..1.2)).collect();
            let ce_target = rng.random_range(0..2usize);
            let program =
                RandomProgram { leaf, layer_dims, input_dim, ce_target, base_point };
            let eval = program.run(&program.base_point, false, None).expect("program evaluates");
            if eval.kink_margin > 50.0 * h {
                return program;
            }
            salt += 1;
        }
    }

    pub fn leaf_len(&self) -> usize {
        self.leaf.total_len()
    }

    pub fn base_point(&self) -> &[f64] {
        &self.base_point
    }

    /// Scalar value of the program at a leaf assignment.
    pub fn eval(&self, leaves: &[f64]) -> f64 {
        self.run(leaves, false, None).expect("program evaluates").value
    }

    /// Analytic gradient of the program at a leaf assignment, flattened in
    /// leaf order.
    pub fn grad(&self, leaves: &[f64]) -> Vec<f64> {
        self.run(leaves, true, None).expect("program evaluates").grads.expect("grads requested")
    }

    /// Directional second derivative: the gradient of `<grad f, w>` with
    /// respect to the leaves, computed by differentiating the backward
    /// pass itself.
    pub fn hessian_vector(&self, leaves: &[f64], w: &[f64]) -> Vec<f64> {
        self.run(leaves, false, Some(w)).expect("program evaluates").hvp.expect("hvp requested")
    }

    fn run(&self, leaves: &[f64], want_grad: bool, hvp_dir: Option<&[f64]>) -> Result<ProgramEval> {
        assert_eq!(leaves.len(), self.leaf.total_len(), "leaf vector length");
        let mut g = Graph::new();
        let mut handles = Vec::with_capacity(self.leaf.shapes.len());
        let mut offset = 0;
        for shape in &self.leaf.shapes {
            let n = shape.numel();
            let data = leaves[offset..offset + n].to_vec();
            offset += n;
            handles.push(g.variable(Tensor::from_parts(*shape, data))?);
        }

        let mut kink_margin = f64::INFINITY;
        let mut track = |g: &Graph, pre: VarHandle| {
            for v in g.value(pre).data() {
                kink_margin = kink_margin.min(v.abs());
            }
        };

        // Dense relu stack.
        let mut h = handles[0];
        let mut idx = 1;
        for _ in &self.layer_dims {
            let w = handles[idx];
            let b = handles[idx + 1];
            idx += 2;
            let z = g.matvec(w, h)?;
            let pre = g.add(z, b)?;
            track(&g, pre);
            h = g.relu(pre)?;
        }

        // Overlapping-slice product to exercise mul/slice/sum fan-out.
        let d = *self.layer_dims.last().unwrap_or(&self.input_dim);
        let half = (d / 2).max(1);
        let a = g.slice(h, 0, half)?;
        let b = g.slice(h, d - half, d)?;
        let prod = g.mul(a, b)?;
        let s_prod = g.sum(prod)?;

        // Guarded exp/log/reciprocal chain; exp input is kept small and the
        // log/reciprocal arguments strictly positive by construction.
        let m = g.mean(h)?;
        let scaled = g.scale(m, 0.35)?;
        let e = g.exp(scaled)?;
        let floor = g.constant_scalar(1.25)?;
        let shifted = g.add(e, floor)?;
        let l = g.log(shifted)?;
        let r = g.reciprocal(shifted)?;

        // Cross-entropy head over the first two activations of h (positive
        // or zero after relu, so no guard needed).
        let logits = g.slice(h, 0, 2)?;
        let ce = g.softmax_cross_entropy(logits, self.ce_target)?;

        // Outer/matmul block over the two fixed matrices.
        let ma = handles[handles.len() - 2];
        let mb = handles[handles.len() - 1];
        let p = g.matmul(ma, mb)?;
        let pt = g.transpose(p)?;
        let s_mat = g.sum(pt)?;
        let col = g.slice(p, 0, 1)?;
        let s_col = g.sum(col)?;

        // Combine every branch into one scalar.
        let pieces = [
            g.scale(s_prod, 0.8)?,
            g.scale(l, 1.4)?,
            g.scale(r, 0.7)?,
            g.scale(ce, 1.1)?,
            g.scale(s_mat, 0.45)?,
            g.scale(s_col, -0.6)?,
        ];
        let stacked = g.stack_scalars(&pieces)?;
        let f = g.sum(stacked)?;

        let value = g.scalar_value(f)?;
        let grads = if want_grad {
            let gs = g.grad(f, &handles, false)?;
            let mut flat = Vec::with_capacity(self.leaf.total_len());
            for gh in gs {
                flat.extend_from_slice(g.value(gh).data());
            }
            Some(flat)
        } else {
            None
        };
        let hvp = if let Some(dir) = hvp_dir {
            assert_eq!(dir.len(), self.leaf.total_len(), "direction length");
            let gs = g.grad(f, &handles, true)?;
            let mut dot_terms = Vec::with_capacity(gs.len());
            let mut offset = 0;
            for gh in &gs {
                let n = gh.shape().numel();
                let w = g.constant(Tensor::from_parts(gh.shape(), dir[offset..offset + n].to_vec()))?;
                offset += n;
                let prod = g.mul(*gh, w)?;
                dot_terms.push(g.sum(prod)?);
            }
            let stacked = g.stack_scalars(&dot_terms)?;
            let dot = g.sum(stacked)?;
            let hs = g.grad(dot, &handles, false)?;
            let mut flat = Vec::with_capacity(self.leaf.total_len());
            for hh in hs {
                flat.extend_from_slice(g.value(hh).data());
            }
            Some(flat)
        } else {
            None
        };

        Ok(ProgramEval { value, kink_margin, grads, hvp })
    }
}

/// Compare the analytic gradient of one random program against central
/// finite differences over every leaf coordinate.
pub fn check_first_order(seed: u64, max_dim: usize, max_depth: usize, h: f64) -> CheckReport {
    let program = RandomProgram::generate(seed, max_dim, max_depth, h);
    let analytic = program.grad(program.base_point());
    let mut f = |x: &[f64]| program.eval(x);
    let numeric = central_diff(&mut f, program.base_point(), h);
    let mut max = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        max = max.max(rel_err(*a, *n));
    }
    CheckReport { max_rel_err: max, coords: analytic.len() }
}

/// Compare a double-backward Hessian-vector product against finite
/// differences of the analytic first-order gradient, on a random direction
/// and a random subset of coordinates (`max_coords` bounds the cost).
pub fn check_second_order(
    seed: u64,
    max_dim: usize,
    max_depth: usize,
    h: f64,
    max_coords: usize,
) -> CheckReport {
    let program = RandomProgram::generate(seed, max_dim, max_depth, h);
    let n = program.leaf_len();
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5ca1ab1e);
    let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic = program.hessian_vector(program.base_point(), &dir);

    let mut coords: Vec<usize> = (0..n).collect();
    if n > max_coords {
        // Fisher-Yates prefix shuffle: a uniform random subset is enough.
        for i in 0..max_coords {
            let j = rng.random_range(i..n);
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }

    let mut point = program.base_point().to_vec();
    let mut max = 0.0f64;
    for &i in &coords {
        let orig = point[i];
        point[i] = orig + h;
        let plus = program.grad(&point);
        point[i] = orig - h;
        let minus = program.grad(&point);
        point[i] = orig;
        let dot_plus: f64 = plus.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let dot_minus: f64 = minus.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let numeric = (dot_plus - dot_minus) / (2.0 * h);
        max = max.max(rel_err(analytic[i], numeric));
    }
    CheckReport { max_rel_err: max, coords: coords.len() }
}
