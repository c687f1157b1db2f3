//! Central-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Binder, ParamStore};
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compare analytic and central-difference gradients of `model_fn`.
///
/// Every parameter tensor contributes at least one coordinate; the rest of
/// the `coords` budget is spread uniformly. `model_fn` must be
/// deterministic: it is evaluated once with recording and twice per
/// coordinate without.
pub fn grad_check<F, R>(
    mut model_fn: F,
    params: &ParamStore,
    h: f64,
    coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &mut Binder) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic = {
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let loss = model_fn(&mut g, &mut b)?;
        let grads = g.backward(loss)?;
        b.collect_grads(&g, &grads)
    };

    let mut picks: Vec<(String, usize)> = Vec::new();
    let names: Vec<(String, usize)> = params.iter().map(|(n, t)| (n.clone(), t.len())).collect();
    for (name, len) in &names {
        picks.push((name.clone(), rng.gen_range(0..*len)));
    }
    let total: usize = names.iter().map(|(_, l)| l).sum();
    while picks.len() < coords.max(names.len()) {
        let mut r = rng.gen_range(0..total);
        for (name, len) in &names {
            if r < *len {
                picks.push((name.clone(), r));
                break;
            }
            r -= len;
        }
    }
    picks.shuffle(rng);

    let mut work = params.clone();
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let mut b = Binder::new(store);
        let loss = model_fn(&mut g, &mut b)?;
        Ok(g.value(loss).item())
    };
    let mut out = Vec::with_capacity(picks.len());
    for (name, index) in picks {
        let orig = work.get(&name).unwrap().data()[index];
        work.get_mut(&name).unwrap().data_mut()[index] = orig + h;
        let plus = eval(&work)?;
        work.get_mut(&name).unwrap().data_mut()[index] = orig - h;
        let minus = eval(&work)?;
        work.get_mut(&name).unwrap().data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.get(&name).map(|g| g[index]).unwrap_or(0.0);
        out.push(CoordCheck { param: name, index, analytic: a, numeric, rel_error: relative_error(a, numeric) });
    }
    let max_rel_error = out.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, coords: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut ps = ParamStore::new();
        ps.insert("p", Tensor::scalar(3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rep = grad_check(
            |g, b| {
                let p = b.get(g, "p");
                let sq = g.mul(p, p);
                Ok(g.sum(sq))
            },
            &ps,
            1e-5,
            1,
            &mut rng,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
        assert!((rep.coords[0].analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn detached_branch_reports_zero_both_ways() {
        let mut ps = ParamStore::new();
        ps.insert("x", Tensor::vector(vec![1.0, 2.0]));
        ps.insert("y", Tensor::vector(vec![0.5, -0.5]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rep = grad_check(
            |g, b| {
                let x = b.get(g, "x");
                let y = g.constant(b.store().get("y").unwrap().clone());
                let sq = g.mul(x, x);
                let main = g.sum(sq);
                let side = g.sum(y);
                let side = g.scale(side, 0.0);
                Ok(g.add(main, side))
            },
            &ps,
            1e-5,
            6,
            &mut rng,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-8);
        let ys: Vec<_> = rep.coords.iter().filter(|c| c.param == "y").collect();
        assert!(!ys.is_empty());
        for c in ys {
            assert_eq!(c.analytic, 0.0);
            assert_eq!(c.numeric, 0.0);
        }
    }
}
