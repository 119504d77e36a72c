//! Finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub enum GradCheckStatus {
    Passed,
    Failed,
    /// The function was not finite at the base point or at a probe.
    NonFinite { probe: Option<usize> },
    /// A straight-through op lies on the path; its forward value is piecewise
    /// constant, so finite differences cannot agree with the surrogate gradient.
    SkippedSte,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub status: GradCheckStatus,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.status == GradCheckStatus::Passed
    }
}

/// Relative error with an absolute floor: `|a - b| / max(1, |a|, |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares the tape gradient of scalar `f` at `x` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let root = f(&mut tape, xv)?;
    let base = tape.scalar(root);
    let mut report = GradCheckReport {
        status: GradCheckStatus::Passed,
        max_rel_error: 0.0,
        worst_index: None,
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    if tape.depends_on_ste(root) {
        report.status = GradCheckStatus::SkippedSte;
        return Ok(report);
    }
    if !base.is_finite() {
        report.status = GradCheckStatus::NonFinite { probe: None };
        return Ok(report);
    }
    let grads = tape.backward(root)?;
    report.analytic = grads.wrt(xv, x.len());

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let probe = Tensor::new(x.shape().to_vec(), values)?;
        let v = t.leaf(&probe);
        let r = f(&mut t, v)?;
        Ok(t.scalar(r))
    };

    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            report.status = GradCheckStatus::NonFinite { probe: Some(i) };
            return Ok(report);
        }
        let numeric = (fp - fm) / (2.0 * step);
        let err = rel_error(report.analytic[i], numeric);
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
        report.numeric.push(numeric);
    }
    if report.max_rel_error > tol {
        report.status = GradCheckStatus::Failed;
    }
    Ok(report)
}

/// Named scalar probe used by [`op_kind_suite`].
type Probe = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Central-difference check of every differentiable op kind at random points.
///
/// Each probe reduces the op output to a scalar through a random weighting so
/// that every output entry contributes a distinct gradient.
pub fn op_kind_suite(seed: u64, step: f64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let w42 = rand_t(&[4, 2]);
    let w32 = rand_t(&[3, 2]);
    let w52 = rand_t(&[5, 2]);
    let r34 = rand_t(&[3, 4]);
    let r14 = rand_t(&[1, 4]);
    let gamma = rand_t(&[1, 4]);
    let beta = rand_t(&[1, 4]);
    let r31 = rand_t(&[3, 1]);
    let r24 = rand_t(&[2, 4]);
    let r38 = rand_t(&[3, 8]);
    let r12 = rand_t(&[1, 2]);
    let r43 = rand_t(&[4, 3]);
    let onehots = Tensor::one_hot_rows(&[2, 0, 3], 4);

    let base = rand_t(&[3, 4]);
    let positive = Tensor::new(vec![3, 4], base.data().iter().map(|v| v.abs() + 0.5).collect())?;
    let mut x_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let targets: Vec<usize> = (0..3).map(|_| x_rng.random_range(0..4)).collect();

    // weighted sum of `out` against a constant of matching shape
    fn weigh(t: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
        let c = t.constant(w);
        let p = t.mul(out, c)?;
        Ok(t.sum(p))
    }

    let mut probes: Vec<(&'static str, Tensor, Probe)> = Vec::new();
    {
        let (w42, r32) = (w42.clone(), w32.clone());
        probes.push(("matmul_lhs", base.clone(), Box::new(move |t, x| {
            let b = t.constant(&w42);
            let o = t.matmul(x, b)?;
            weigh(t, o, &r32)
        })));
    }
    {
        let (a, r52) = (w52.clone(), rand_t(&[5, 4]));
        probes.push(("matmul_rhs", r24.clone(), Box::new(move |t, x| {
            let av = t.constant(&a);
            let o = t.matmul(av, x)?;
            weigh(t, o, &r52)
        })));
    }
    {
        let b = r24.clone();
        let r = rand_t(&[3, 2]);
        probes.push(("matmul_t_lhs", base.clone(), Box::new(move |t, x| {
            let bv = t.constant(&b);
            let o = t.matmul_t(x, bv)?;
            weigh(t, o, &r)
        })));
    }
    {
        let a = r24.clone();
        let r = rand_t(&[2, 3]);
        probes.push(("matmul_t_rhs", base.clone(), Box::new(move |t, x| {
            let av = t.constant(&a);
            let o = t.matmul_t(av, x)?;
            weigh(t, o, &r)
        })));
    }
    {
        let (onehots, r) = (onehots.clone(), rand_t(&[3, 3]));
        probes.push(("embed_table", r43.clone(), Box::new(move |t, x| {
            let oh = t.constant(&onehots);
            let o = t.embed(oh, x)?;
            weigh(t, o, &r)
        })));
    }
    {
        let (table, r) = (r43.clone(), rand_t(&[3, 3]));
        probes.push(("embed_rows", base.clone(), Box::new(move |t, x| {
            let tb = t.constant(&table);
            let o = t.embed(x, tb)?;
            weigh(t, o, &r)
        })));
    }
    {
        let (other, r) = (r34.clone(), rand_t(&[3, 4]));
        probes.push(("add", base.clone(), Box::new(move |t, x| {
            let o = t.constant(&other);
            let s = t.add(x, o)?;
            let s2 = t.mul(s, s)?;
            weigh(t, s2, &r)
        })));
    }
    {
        let (a, r) = (r34.clone(), rand_t(&[3, 4]));
        probes.push(("add_row", r14.clone(), Box::new(move |t, x| {
            let av = t.constant(&a);
            let s = t.add(av, x)?;
            let s2 = t.mul(s, s)?;
            weigh(t, s2, &r)
        })));
    }
    {
        let (other, r) = (r34.clone(), rand_t(&[3, 4]));
        probes.push(("mul", base.clone(), Box::new(move |t, x| {
            let o = t.constant(&other);
            let p = t.mul(x, o)?;
            let p2 = t.mul(p, x)?;
            weigh(t, p2, &r)
        })));
    }
    {
        let r = rand_t(&[3, 4]);
        probes.push(("scale", base.clone(), Box::new(move |t, x| {
            let s = t.scale(x, -1.7);
            let s2 = t.mul(s, x)?;
            weigh(t, s2, &r)
        })));
    }
    {
        let r = rand_t(&[3, 4]);
        probes.push(("softmax", base.clone(), Box::new(move |t, x| {
            let s = t.softmax(x);
            weigh(t, s, &r)
        })));
    }
    {
        let r = rand_t(&[3, 4]);
        probes.push(("log_softmax", base.clone(), Box::new(move |t, x| {
            let s = t.log_softmax(x);
            weigh(t, s, &r)
        })));
    }
    {
        let (g, b, r) = (gamma.clone(), beta.clone(), rand_t(&[3, 4]));
        probes.push(("layer_norm_x", base.clone(), Box::new(move |t, x| {
            let gv = t.constant(&g);
            let bv = t.constant(&b);
            let o = t.layer_norm(x, gv, bv)?;
            weigh(t, o, &r)
        })));
    }
    {
        let (xin, b, r) = (r34.clone(), beta.clone(), rand_t(&[3, 4]));
        probes.push(("layer_norm_gamma", gamma.clone(), Box::new(move |t, g| {
            let xv = t.constant(&xin);
            let bv = t.constant(&b);
            let o = t.layer_norm(xv, g, bv)?;
            let o2 = t.mul(o, o)?;
            weigh(t, o2, &r)
        })));
    }
    {
        let (xin, g, r) = (r34.clone(), gamma.clone(), rand_t(&[3, 4]));
        probes.push(("layer_norm_beta", beta.clone(), Box::new(move |t, b| {
            let xv = t.constant(&xin);
            let gv = t.constant(&g);
            let o = t.layer_norm(xv, gv, b)?;
            let o2 = t.mul(o, o)?;
            weigh(t, o2, &r)
        })));
    }
    {
        let r = rand_t(&[3, 4]);
        probes.push(("gelu", base.clone(), Box::new(move |t, x| {
            let o = t.gelu(x);
            weigh(t, o, &r)
        })));
    }
    probes.push(("sum", base.clone(), Box::new(|t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    })));
    probes.push(("mean", base.clone(), Box::new(|t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.mean(sq))
    })));
    {
        let r = r31.clone();
        probes.push(("sum_rows", base.clone(), Box::new(move |t, x| {
            let sq = t.mul(x, x)?;
            let s = t.sum_rows(sq);
            weigh(t, s, &r)
        })));
    }
    {
        let r = r14.clone();
        probes.push(("sum_cols", base.clone(), Box::new(move |t, x| {
            let sq = t.mul(x, x)?;
            let s = t.sum_cols(sq);
            weigh(t, s, &r)
        })));
    }
    {
        let tg = targets.clone();
        probes.push(("cross_entropy", base.clone(), Box::new(move |t, x| t.cross_entropy(x, &tg))));
    }
    {
        let (other, r) = (r24.clone(), rand_t(&[5, 4]));
        probes.push(("concat_rows", base.clone(), Box::new(move |t, x| {
            let o = t.constant(&other);
            let c = t.concat_rows(&[o, x])?;
            let c2 = t.mul(c, c)?;
            weigh(t, c2, &r)
        })));
    }
    {
        let (other, r) = (r38.clone(), rand_t(&[3, 12]));
        probes.push(("concat_cols", base.clone(), Box::new(move |t, x| {
            let o = t.constant(&other);
            let c = t.concat_cols(&[x, o])?;
            let c2 = t.mul(c, c)?;
            weigh(t, c2, &r)
        })));
    }
    {
        let r = rand_t(&[2, 4]);
        probes.push(("slice_rows", base.clone(), Box::new(move |t, x| {
            let s = t.slice_rows(x, 1, 3)?;
            let s2 = t.mul(s, s)?;
            weigh(t, s2, &r)
        })));
    }
    {
        let r = rand_t(&[3, 2]);
        probes.push(("slice_cols", base.clone(), Box::new(move |t, x| {
            let s = t.slice_cols(x, 1, 3)?;
            let s2 = t.mul(s, s)?;
            weigh(t, s2, &r)
        })));
    }
    {
        let r = r31.clone();
        probes.push(("max_rows", base.clone(), Box::new(move |t, x| {
            let sq = t.mul(x, x)?;
            let m = t.max_rows(sq);
            weigh(t, m, &r)
        })));
    }
    {
        let r = rand_t(&[3, 4]);
        probes.push(("clamp_max", base.clone(), Box::new(move |t, x| {
            let c = t.clamp_max(x, 0.25);
            let c2 = t.mul(c, c)?;
            weigh(t, c2, &r)
        })));
    }
    {
        let r = rand_t(&[3, 4]);
        probes.push(("ln", positive.clone(), Box::new(move |t, x| {
            let l = t.ln(x);
            weigh(t, l, &r)
        })));
    }
    {
        let r = rand_t(&[4, 3]);
        probes.push(("reshape", base.clone(), Box::new(move |t, x| {
            let sq = t.mul(x, x)?;
            let rs = t.reshape(sq, vec![4, 3])?;
            weigh(t, rs, &r)
        })));
    }
    {
        let r = r12.clone();
        probes.push(("record_op", rand_t(&[1, 2]), Box::new(move |t, x| {
            // cube through a user-recorded rule
            let c = t.record_op(
                "cube",
                &[x],
                |ins| Tensor::new(ins[0].shape().to_vec(), ins[0].data().iter().map(|v| v * v * v).collect()),
                Box::new(|ins, _out, g| vec![ins[0].iter().zip(g).map(|(v, gg)| 3.0 * v * v * gg).collect()]),
            )?;
            weigh(t, c, &r)
        })));
    }

    let mut out = Vec::with_capacity(probes.len());
    for (name, x, f) in probes {
        out.push((name, grad_check(f, &x, step, tol)?));
    }
    Ok(out)
}
