mod common;

use common::{loss_batch, metric_losses, mining_oracle, rng, swapped};
use proptest::prelude::*;
use xmodal::autograd::Tape;
use xmodal::losses::{bdtr_loss, mine, total_loss, LossConfig, MetricLoss, Reduction};
use xmodal::network::{Ablation, Mtmfe};
use xmodal::{diagnostics, Modality, Tensor};

#[test]
fn mining_matches_exhaustive_search() {
    let mut r = rng(5);
    for _ in 0..1000 {
        let b = loss_batch(&mut r, 4, 3);
        let mined = mine(&b.x, &b.ids, &b.modalities).unwrap();
        assert_eq!(mined.anchors, mining_oracle(&b.x, &b.ids, &b.modalities));
    }
}

#[test]
fn loss_algebra_on_random_batches() {
    let mut r = rng(6);
    for i in 0..1000 {
        let b = loss_batch(&mut r, 4, 3);
        let margin = [0.0, 0.1, 0.3, 1.0][i % 4];
        let normalize = i % 3 != 0;
        let (cq, bd, st) = metric_losses(&b, &b.modalities, margin, normalize);
        assert!(cq >= 0.0 && bd >= 0.0 && st >= 0.0);
        assert!(cq >= bd, "cq {cq} < bdtr {bd}");
        let (cq2, bd2, st2) = metric_losses(&b, &swapped(&b.modalities), margin, normalize);
        assert!((cq - cq2).abs() <= 1e-12 && (bd - bd2).abs() <= 1e-12 && (st - st2).abs() <= 1e-12);
    }
}

#[test]
fn separated_clusters_cost_nothing() {
    // two identities far apart, both modalities on top of each other
    let x = Tensor::new(vec![4, 1], vec![0.0, 10.0, 0.0, 10.0]).unwrap();
    let ids = [0, 1, 0, 1];
    let mods = [Modality::Rgb, Modality::Rgb, Modality::Ir, Modality::Ir];
    let mut tape = Tape::new();
    let v = tape.input(x);
    let l = bdtr_loss(&mut tape, v, &ids, &mods, 0.3, false).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn hand_computed_bdtr() {
    // anchors see cross positive at half-sq-dist 2 and cross negative at 0.5
    let x = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 1.0]).unwrap();
    let ids = [0, 1, 0, 1];
    let mods = [Modality::Rgb, Modality::Rgb, Modality::Ir, Modality::Ir];
    let mut tape = Tape::new();
    let v = tape.input(x);
    let l = bdtr_loss(&mut tape, v, &ids, &mods, 0.1, false).unwrap();
    // row 0: pos row 2 (2.0), neg row 3 (0.5) -> 1.6
    // row 1: pos row 3 (0.0), neg row 2 (0.5) -> 0
    // row 2: pos row 0 (2.0), neg row 1 (0.5) -> 1.6
    // row 3: pos row 1 (0.0), neg row 0 (0.5) -> 0
    assert!((tape.value(l).item() - 3.2).abs() < 1e-12);
}

#[test]
fn mean_reduction_divides_hinge_terms_by_batch_rows() {
    let cfg = diagnostics::micro_config();
    let net = Mtmfe::new(cfg.clone(), Ablation::default()).unwrap();
    let store = net.init_params(&mut rng(2));
    let [c, h, w] = cfg.image_shape;
    let rgb = Tensor::uniform(&[4, c, h, w], 1.0, &mut rng(3));
    let ir = Tensor::uniform(&[4, c, h, w], 1.0, &mut rng(4));
    let ids = [0, 0, 1, 1, 0, 0, 1, 1];
    let mods: Vec<Modality> = [Modality::Rgb; 4].into_iter().chain([Modality::Ir; 4]).collect();
    let breakdown = |reduction| {
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, &store, &rgb, &ir).unwrap();
        let lc = LossConfig { anchor_reduction: reduction, ..LossConfig::default() };
        total_loss(&mut tape, &f.parts, &ids, &mods, &lc, MetricLoss::Cq).unwrap().1
    };
    let (sum, mean) = (breakdown(Reduction::Sum), breakdown(Reduction::Mean));
    for (s, m) in sum.terms.iter().zip(&mean.terms) {
        assert!((s.cq / 8.0 - m.cq).abs() < 1e-12);
        assert!((s.st / 8.0 - m.st).abs() < 1e-12);
        assert_eq!(s.id_rgb, m.id_rgb);
    }
}

proptest! {
    #[test]
    fn translation_leaves_unnormalized_losses_unchanged(seed in any::<u64>(), shift in -3.0f64..3.0) {
        let b = loss_batch(&mut rng(seed), 3, 3);
        let (cq, bd, st) = metric_losses(&b, &b.modalities, 0.3, false);
        let mut moved = b;
        moved.x.data_mut().iter_mut().for_each(|v| *v += shift);
        let (cq2, bd2, st2) = metric_losses(&moved, &moved.modalities, 0.3, false);
        prop_assert!((cq - cq2).abs() < 1e-9 && (bd - bd2).abs() < 1e-9 && (st - st2).abs() < 1e-9);
    }

    #[test]
    fn larger_margin_never_lowers_the_loss(seed in any::<u64>(), m in 0.0f64..1.0, extra in 0.0f64..1.0) {
        let b = loss_batch(&mut rng(seed), 4, 3);
        let lo = metric_losses(&b, &b.modalities, m, true);
        let hi = metric_losses(&b, &b.modalities, m + extra, true);
        prop_assert!(hi.0 >= lo.0 && hi.1 >= lo.1 && hi.2 >= lo.2);
    }
}
