//! Whole-network gradients: finite differences through every module, and
//! every AIM/SIM branch receiving signal.

use std::collections::BTreeMap;

use minet_core::backbone::{BackboneConfig, ImageBatch, LEVELS};
use minet_core::losses::{loss_node, GroundTruthMask, LossConfig};
use minet_core::model::{MiNet, ModelConfig};
use minet_core::nn::{ParamId, ParamStore, Session};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            channels: [4, 8, 8, 8, 8],
            depths: [1; LEVELS],
            ..BackboneConfig::toy()
        },
        channels: [8; LEVELS],
        aim_mid_channels: [4; LEVELS],
        sim_high_channels: [4; LEVELS],
        ..ModelConfig::default()
    }
}

fn inputs() -> (ImageBatch, GroundTruthMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let img = Array4::from_shape_fn((2, 32, 32, 3), |_| rng.random_range(0.0..1.0));
    let gt = Array4::from_shape_fn((2, 32, 32, 1), |(b, y, x, _)| {
        let (cy, cx) = (12.0 + 6.0 * b as f64, 15.0);
        (((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) < 64.0) as u8 as f64
    });
    (ImageBatch::new(img).unwrap(), GroundTruthMask::new(gt).unwrap())
}

fn loss(net: &MiNet, store: &ParamStore, img: &ImageBatch, gt: &GroundTruthMask) -> f64 {
    let s = Session::new(store, true);
    let (p, _) = net.forward(&s, img).unwrap();
    loss_node(&p, gt, &LossConfig::default()).unwrap().1.total
}

fn module_of(name: &str) -> String {
    let mut parts = name.split('.');
    match parts.next() {
        // group backbone parameters per pyramid level
        Some("backbone") => format!("backbone.{}", parts.find(|p| p.starts_with("level")).unwrap_or("")),
        Some(m) => m.to_string(),
        None => String::new(),
    }
}

#[test]
fn every_module_matches_finite_differences() {
    let (net, mut store) = MiNet::build(&small()).unwrap();
    let (img, gt) = inputs();
    let grads = {
        let s = Session::new(&store, true);
        let (p, _) = net.forward(&s, &img).unwrap();
        loss_node(&p, &gt, &LossConfig::default()).unwrap().0.backward()
    };

    let mut by_module: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, p) in store.params().iter().enumerate() {
        let entry = by_module.entry(module_of(&p.name)).or_default();
        entry.extend((0..p.value.len()).map(|j| (i, j)));
    }
    assert!(by_module.len() >= 3 * LEVELS, "modules: {:?}", by_module.keys());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    let mut checked = 0;
    for (module, scalars) in &by_module {
        for _ in 0..10.min(scalars.len()) {
            let (i, j) = scalars[rng.random_range(0..scalars.len())];
            let analytic = grads.get(i).map_or(0.0, |g| g.as_slice_memory_order().unwrap()[j]);
            // a ReLU or max-pool kink inside the stencil spoils one step size
            // but rarely all of them
            let ok = [1e-5, 1e-6, 1e-4].iter().any(|&h| {
                let original = store.params()[i].value.as_slice_memory_order().unwrap()[j];
                let mut at = |v: f64| {
                    store.param_mut(ParamId(i)).value.as_slice_memory_order_mut().unwrap()[j] = v;
                    loss(&net, &store, &img, &gt)
                };
                let numeric = (at(original + h) - at(original - h)) / (2.0 * h);
                at(original);
                (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()).max(1e-4)
            });
            checked += 1;
            if !ok {
                failures.push(format!("{module}: {} [{j}] analytic {analytic:e}", store.params()[i].name));
            }
        }
    }
    assert!(failures.is_empty(), "{} of {checked} scalars disagree: {failures:#?}", failures.len());
}

#[test]
fn every_interaction_branch_receives_gradient() {
    let (net, store) = MiNet::build(&small()).unwrap();
    let (img, gt) = inputs();
    let s = Session::new(&store, true);
    let (p, _) = net.forward(&s, &img).unwrap();
    let grads = loss_node(&p, &gt, &LossConfig::default()).unwrap().0.backward();
    let live = |ids: &[ParamId]| ids.iter().any(|id| grads.get(id.0).is_some_and(|g| g.iter().any(|&v| v != 0.0)));

    let aims = net.aims();
    assert_eq!(aims.len(), LEVELS);
    for (level, aim) in aims.iter().enumerate() {
        let groups = aim.param_groups();
        let branches = groups.iter().filter(|(n, _)| n.starts_with("branch")).count();
        assert_eq!(branches, if level == 0 || level == LEVELS - 1 { 2 } else { 3 }, "aim{level}");
        for (name, ids) in groups {
            assert!(live(&ids), "aim{level}.{name} has no gradient");
        }
    }
    assert_eq!(net.sims().len(), LEVELS);
    for (level, sim) in net.sims().iter().enumerate() {
        for (name, ids) in sim.param_groups() {
            assert!(live(&ids), "sim{level}.{name} has no gradient");
        }
    }
}
