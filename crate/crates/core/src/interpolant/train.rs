use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{target_from_states, DriftNet, TrainingConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::mesh::{CenterlineEncoding, Vec3};
use crate::nn::{points_to_array, Adam, Plateau};
use crate::registration::TimeFlow;

/// A registered template flow and the condition of its target shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub flow: TimeFlow,
    pub condition: CenterlineEncoding,
}

/// Squared drift residual `Σ_nodes ‖b − u‖²` of one shape and its gradient
/// with respect to every network weight.
fn shape_loss(net: &DriftNet, state: &[Vec3], target: &Array2<f64>, t: f64, cond: &CenterlineEncoding) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let p = net.record_params(&mut tape);
    let b = net.record(&mut tape, &p, state, t, cond)?;
    let u = tape.leaf(target.clone());
    let l = tape.sum_squared_error(b, u);
    let mut g = tape.backward(l);
    Ok((tape.scalar(l), p.into_iter().map(|v| g.take(v)).collect()))
}

struct Draw {
    shape: usize,
    t: f64,
    eps: Vec<Vec3>,
}

/// Runs `epochs` passes over `pairs` in mini-batches, one `(t, ε)` draw per
/// shape per epoch, and returns the per-epoch mean shape loss.
fn fit(net: &mut DriftNet, pairs: &[TrainingPair], template: &[Vec3], cfg: &TrainingConfig, epochs: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    if epochs == 0 {
        return Ok(Vec::new());
    }
    let states: Vec<Vec<Vec<Vec3>>> = pairs.par_iter().map(|p| p.flow.trajectory(template)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut plateau = Plateau::new(cfg.patience, cfg.decay);
    let mut trace = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let draws: Vec<Draw> = order
            .iter()
            .map(|&shape| {
                let t: f64 = rng.random();
                let eps = (0..template.len())
                    .map(|_| Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)))
                    .collect();
                Draw { shape, t, eps }
            })
            .collect();
        let mut epoch_loss = 0.0;
        for batch in draws.chunks(cfg.batch_size) {
            let terms: Vec<(f64, Vec<Array2<f64>>)> = batch
                .par_iter()
                .map(|d| {
                    let pair = &pairs[d.shape];
                    let tg = target_from_states(&pair.flow, &states[d.shape], d.t, &d.eps, &cfg.schedule)?;
                    shape_loss(net, &tg.state, &points_to_array(&tg.target), d.t, &pair.condition)
                })
                .collect::<Result<_>>()?;
            // Fixed-order reduction keeps results independent of scheduling.
            let w = 1.0 / batch.len() as f64;
            let mut iter = terms.into_iter();
            let (l0, mut grads) = iter.next().expect("non-empty batch");
            let mut loss = l0;
            for (l, g) in iter {
                loss += l;
                for (a, b) in grads.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            for g in &mut grads {
                *g *= w;
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("drift training loss at epoch {epoch}")));
            }
            epoch_loss += loss;
            adam.step(net.params_mut(), &grads);
        }
        let epoch_loss = epoch_loss / pairs.len() as f64;
        trace.push(epoch_loss);
        adam.lr = plateau.observe(epoch_loss, adam.lr);
    }
    Ok(trace)
}

fn check_pairs(net: &DriftNet, pairs: &[TrainingPair], template: &[Vec3]) -> Result<()> {
    if let Some(g) = &net.graph {
        if g.len() != template.len() {
            return Err(Error::invalid("drift net graph was built for a different template"));
        }
    }
    if pairs.iter().any(|p| p.condition.n_cntrl() != net.config.n_cntrl) {
        return Err(Error::invalid("condition size does not match the drift net"));
    }
    Ok(())
}

/// Trains `net` on all pairs for `cfg.epochs` epochs. The condition
/// normaliser is fitted on the first call and kept afterwards.
pub fn train(mut net: DriftNet, pairs: &[TrainingPair], template: &[Vec3], cfg: &TrainingConfig) -> Result<(DriftNet, Vec<f64>)> {
    check_pairs(&net, pairs, template)?;
    if !net.cond_fitted {
        let conds: Vec<&CenterlineEncoding> = pairs.iter().map(|p| &p.condition).collect();
        net.fit_condition_normalizer(&conds)?;
    }
    let trace = fit(&mut net, pairs, template, cfg, cfg.epochs)?;
    net.loss_trace.extend_from_slice(&trace);
    Ok((net, trace))
}

/// Continues training on `pairs` for `cfg.finetune_epochs` epochs with a
/// fresh optimiser state.
pub fn finetune(mut net: DriftNet, pairs: &[TrainingPair], template: &[Vec3], cfg: &TrainingConfig) -> Result<(DriftNet, Vec<f64>)> {
    check_pairs(&net, pairs, template)?;
    let trace = fit(&mut net, pairs, template, cfg, cfg.finetune_epochs)?;
    net.loss_trace.extend_from_slice(&trace);
    Ok((net, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpolant::{DriftNetConfig, SigmaSchedule};
    use crate::mesh::generate::icosphere;
    use crate::mesh::BoundingBox;

    fn bbox(pts: &[Vec3]) -> BoundingBox {
        BoundingBox::from_points(pts)
    }

    fn cond(x: f64) -> CenterlineEncoding {
        CenterlineEncoding::new(vec![Vec3::new(x, 0.0, 0.0)], vec![1.0]).unwrap()
    }

    fn small_net(tpl: &[Vec3]) -> DriftNet {
        let cfg = DriftNetConfig { n_f: 3, n_cntrl: 1, head_width: 16, trunk: vec![32, 32], seed: 1, ..Default::default() };
        DriftNet::new(cfg, tpl).unwrap()
    }

    #[test]
    fn zero_epochs_and_zero_rate_leave_weights() {
        let tpl = icosphere(1, 1.0).vertices;
        let pair = TrainingPair { flow: TimeFlow::constant(&[Vec3::x(); 2], bbox(&tpl)), condition: cond(1.0) };
        let (net, _) = train(small_net(&tpl), std::slice::from_ref(&pair), &tpl, &TrainingConfig { epochs: 3, lr: 1e-2, ..Default::default() }).unwrap();
        let cfg = TrainingConfig { finetune_epochs: 0, ..Default::default() };
        let (same, trace) = finetune(net.clone(), std::slice::from_ref(&pair), &tpl, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(same, net);
        let cfg = TrainingConfig { finetune_epochs: 5, lr: 0.0, ..Default::default() };
        let (frozen, trace) = finetune(net.clone(), std::slice::from_ref(&pair), &tpl, &cfg).unwrap();
        assert_eq!(trace.len(), 5);
        assert_eq!(frozen.params(), net.params());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        use crate::autodiff::check::max_rel_error;
        let tpl: Vec<Vec3> = (0..5).map(|i| Vec3::new((i as f64).cos(), (i as f64).sin(), 0.3 * i as f64)).collect();
        let cfg = DriftNetConfig { n_f: 1, n_cntrl: 1, head_width: 4, trunk: vec![4], seed: 3, ..Default::default() };
        let mut net = DriftNet::new(cfg, &tpl).unwrap();
        for p in net.trunk_out.params_mut() {
            p.mapv_inplace(|_| 0.2);
        }
        assert!(net.n_params() <= 200, "{}", net.n_params());
        let flows = [TimeFlow::constant(&[Vec3::new(0.2, 0.0, 0.1); 2], bbox(&tpl)), TimeFlow::constant(&[Vec3::new(-0.1, 0.3, 0.0); 2], bbox(&tpl))];
        let conds = [cond(0.5), cond(-0.5)];
        let ts = [0.3, 0.8];
        let eps: Vec<Vec3> = tpl.iter().map(|p| p * 0.5).collect();
        let sched = SigmaSchedule::constant(0.1);
        let targets: Vec<_> = (0..2)
            .map(|i| crate::interpolant::conditional_drift_target(&flows[i], &tpl, ts[i], &eps, &sched).unwrap())
            .collect();
        let batch_loss = |net: &DriftNet| -> (f64, Vec<Array2<f64>>) {
            let mut total = 0.0;
            let mut grads: Option<Vec<Array2<f64>>> = None;
            for i in 0..2 {
                let (l, g) = shape_loss(net, &targets[i].state, &points_to_array(&targets[i].target), ts[i], &conds[i]).unwrap();
                total += 0.5 * l;
                match &mut grads {
                    None => grads = Some(g.into_iter().map(|a| a * 0.5).collect()),
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += &(b * 0.5)),
                }
            }
            (total, grads.unwrap())
        };
        let (_, analytic) = batch_loss(&net);
        let mut params: Vec<Array2<f64>> = net.params().into_iter().cloned().collect();
        let err = max_rel_error(&mut params, &analytic, 1e-6, 1e-6, |ps| {
            let mut probe = net.clone();
            for (dst, src) in probe.params_mut().into_iter().zip(ps) {
                dst.assign(src);
            }
            batch_loss(&probe).0
        });
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_flow_loss_approaches_noise_floor() {
        let tpl = icosphere(1, 1.0).vertices;
        let pair = TrainingPair { flow: TimeFlow::new(2, &[4], bbox(&tpl), 1.0, 0.1, 0), condition: cond(0.0) };
        let sched = SigmaSchedule::constant(0.05);
        let cfg = TrainingConfig { epochs: 400, lr: 1e-3, schedule: sched, seed: 4, ..Default::default() };
        let (_, trace) = train(small_net(&tpl), &[pair], &tpl, &cfg).unwrap();
        // E‖σ ε‖² summed over nodes; the untrained net sits exactly at it.
        let floor = 0.05f64.powi(2) * 3.0 * tpl.len() as f64;
        let tail: f64 = trace[300..].iter().sum::<f64>() / 100.0;
        assert!((tail / floor - 1.0).abs() < 0.1, "tail {tail}, floor {floor}");
    }

    #[test]
    fn condition_disambiguates_opposite_translations() {
        let tpl = icosphere(1, 1.0).vertices;
        let v = Vec3::new(0.3, 0.0, 0.0);
        let pairs = [
            TrainingPair { flow: TimeFlow::constant(&[v; 4], bbox(&tpl)), condition: cond(1.0) },
            TrainingPair { flow: TimeFlow::constant(&[-v; 4], bbox(&tpl)), condition: cond(-1.0) },
        ];
        let cfg = TrainingConfig { epochs: 600, lr: 3e-3, batch_size: 2, schedule: SigmaSchedule::default(), seed: 2, ..Default::default() };
        let (net, trace) = train(small_net(&tpl), &pairs, &tpl, &cfg).unwrap();
        assert_eq!(net.loss_trace, trace);
        let b = net.drift(&tpl, 0.0, &cond(1.0)).unwrap();
        let worst = b.iter().map(|x| (x - v).norm() / v.norm()).fold(0.0f64, f64::max);
        assert!(worst < 0.1, "worst relative drift error {worst}");
        let b = net.drift(&tpl, 0.0, &cond(-1.0)).unwrap();
        let worst = b.iter().map(|x| (x + v).norm() / v.norm()).fold(0.0f64, f64::max);
        assert!(worst < 0.1, "worst relative drift error {worst}");
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let tpl = icosphere(1, 1.0).vertices;
        let v = Vec3::new(0.1, 0.2, 0.0);
        let pairs: Vec<TrainingPair> = (0..5)
            .map(|i| TrainingPair { flow: TimeFlow::constant(&[v * i as f64; 2], bbox(&tpl)), condition: cond(i as f64) })
            .collect();
        let cfg = TrainingConfig { epochs: 20, lr: 1e-3, batch_size: 2, seed: 8, ..Default::default() };
        let a = train(small_net(&tpl), &pairs, &tpl, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| train(small_net(&tpl), &pairs, &tpl, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn finetune_on_training_pairs_keeps_improving() {
        let tpl = icosphere(1, 1.0).vertices;
        let pairs: Vec<TrainingPair> = (0..4)
            .map(|i| {
                let v = Vec3::new(0.1 * i as f64, 0.05, -0.02 * i as f64);
                TrainingPair { flow: TimeFlow::constant(&[v; 2], bbox(&tpl)), condition: cond(i as f64) }
            })
            .collect();
        // Expectation over optimiser seeds, without irreducible noise.
        let mut windows = vec![0.0; 6];
        for seed in 0..4 {
            let cfg = TrainingConfig { epochs: 50, finetune_epochs: 300, lr: 1e-3, seed, schedule: SigmaSchedule::zero(), ..Default::default() };
            let (net, _) = train(small_net(&tpl), &pairs, &tpl, &cfg).unwrap();
            let (_, trace) = finetune(net, &pairs, &tpl, &cfg).unwrap();
            for (w, chunk) in windows.iter_mut().zip(trace.chunks(50)) {
                *w += chunk.iter().sum::<f64>() / 200.0;
            }
        }
        assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
    }

    #[test]
    fn mismatched_condition_is_rejected() {
        let tpl = icosphere(1, 1.0).vertices;
        let c2 = CenterlineEncoding::new(vec![Vec3::zeros(); 2], vec![1.0; 2]).unwrap();
        let pair = TrainingPair { flow: TimeFlow::constant(&[Vec3::x(); 2], bbox(&tpl)), condition: c2 };
        assert!(train(small_net(&tpl), &[pair], &tpl, &TrainingConfig::default()).is_err());
    }
}
