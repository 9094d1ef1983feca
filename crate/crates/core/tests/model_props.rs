use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmn_core::model::{
    gate_embeddings, score_triplet, Labels, GATE_CHILD, GATE_PARENT, PRIMAL_U, SCORER_PREFIX,
};
use tmn_core::tape::Tape;
use tmn_core::{
    BaselineKind, CandidatePosition, ConceptId, Model, ModelSpec, ParamStore, Tensor, TmnConfig,
};

fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

fn vector(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn p<'a>(s: &'a ParamStore, name: &str) -> &'a [f64] {
    s.by_name(name).unwrap_or_else(|| panic!("{name}")).data()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// W·x for a row-major [rows, cols] matrix.
fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Straight-line NTN hidden layer.
fn ntn_hidden(s: &ParamStore, prefix: &str, k: usize, xq: &[f64], xt: &[f64]) -> Vec<f64> {
    let w = p(s, &format!("{prefix}.W"));
    let v = p(s, &format!("{prefix}.V"));
    let b = p(s, &format!("{prefix}.b"));
    let (d, m) = (xq.len(), xt.len());
    let z: Vec<f64> = xq.iter().chain(xt).copied().collect();
    let lin = matvec(v, &z);
    (0..k)
        .map(|i| {
            let mut bil = 0.0;
            for a in 0..d {
                for c in 0..m {
                    bil += xq[a] * w[i * d * m + a * m + c] * xt[c];
                }
            }
            bil + lin[i] + b[i]
        })
        .collect()
}

fn oracle(
    s: &ParamStore,
    cfg: &TmnConfig,
    xq: &[f64],
    xp: &[f64],
    xc: &[f64],
) -> (f64, [Option<f64>; 3]) {
    let (mut xp, mut xc) = (xp.to_vec(), xc.to_vec());
    if cfg.gating {
        let joint: Vec<f64> = xq.iter().chain(&xp).chain(&xc).copied().collect();
        let gp = matvec(p(s, GATE_PARENT), &joint);
        let gc = matvec(p(s, GATE_CHILD), &joint);
        xp = xp.iter().zip(&gp).map(|(x, g)| x * sigmoid(*g)).collect();
        xc = xc.iter().zip(&gc).map(|(x, g)| x * sigmoid(*g)).collect();
    }
    let pair: Vec<f64> = xp.iter().chain(&xc).copied().collect();
    let targets = [&xp, &xc, &pair];
    let mut acts = Vec::new();
    let mut aux = [None; 3];
    for j in 0..3 {
        if !cfg.scorers[j] {
            continue;
        }
        let a: Vec<f64> = ntn_hidden(s, SCORER_PREFIX[j], cfg.k, xq, targets[j])
            .iter()
            .map(|h| h.tanh())
            .collect();
        let u = p(s, &format!("{}.u", SCORER_PREFIX[j]));
        aux[j] = Some(a.iter().zip(u).map(|(x, y)| x * y).sum());
        acts.extend(a);
    }
    let primal = acts.iter().zip(p(s, PRIMAL_U)).map(|(x, y)| x * y).sum();
    (primal, aux)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn triplet_scores_match_reference(
        seed in any::<u64>(),
        d in 1usize..7,
        k in 1usize..6,
        gating in any::<bool>(),
        mask in 1u8..8,
    ) {
        let scorers = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
        let cfg = TmnConfig { dim: d, k, lambdas: [1.0; 3], gating, scorers };
        let mut model = Model::init(ModelSpec::Tmn(cfg.clone()), seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        randomize(&mut model.store, &mut r, 0.8);
        let (xq, xp, xc) = (vector(&mut r, d), vector(&mut r, d), vector(&mut r, d));
        let got = score_triplet(&model.store, &cfg, &xq, &xp, &xc).unwrap();
        let (primal, aux) = oracle(&model.store, &cfg, &xq, &xp, &xc);
        prop_assert!((got.primal - primal).abs() <= 1e-10, "{} vs {}", got.primal, primal);
        for j in 0..3 {
            match (got.s[j], aux[j]) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-10),
                (None, None) => {}
                other => prop_assert!(false, "scorer {j}: {other:?}"),
            }
        }
    }

    #[test]
    fn gates_scale_inputs_into_open_interval(seed in any::<u64>(), d in 1usize..8) {
        let cfg = TmnConfig::new(d);
        let mut model = Model::init(ModelSpec::Tmn(cfg), seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        randomize(&mut model.store, &mut r, 1.0);
        let xq = vector(&mut r, d);
        let xp: Vec<f64> = (0..d).map(|_| r.gen_range(0.1..1.0)).collect();
        let xc: Vec<f64> = (0..d).map(|_| r.gen_range(0.1..1.0)).collect();
        let (gp, gc) = gate_embeddings(&model.store, &xq, &xp, &xc).unwrap();
        for (g, x) in gp.iter().zip(&xp).chain(gc.iter().zip(&xc)) {
            let ratio = g / x;
            prop_assert!(ratio > 0.0 && ratio < 1.0, "ratio {ratio}");
        }
    }
}

fn table(n: usize, d: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(n, d, (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rows() -> (Vec<(ConceptId, CandidatePosition)>, Labels) {
    let c = ConceptId;
    let rows = vec![
        (c(0), CandidatePosition::new(c(1), c(2))),
        (c(0), CandidatePosition::leaf(c(3))),
        (c(4), CandidatePosition::new(c(1), c(3))),
        (c(4), CandidatePosition::leaf(c(2))),
    ];
    let labels = Labels {
        y: vec![1.0, 0.0, 0.0, 1.0],
        y_parent: vec![1.0, 0.0, 1.0, 1.0],
        y_child: vec![1.0, 1.0, 0.0, 1.0],
    };
    (rows, labels)
}

fn loss_and_grads(model: &Model, table: &Tensor) -> (f64, tmn_core::tape::Gradients) {
    let (rows, labels) = rows();
    let mut tape = Tape::new(&model.store);
    let out = model.forward(&mut tape, table, &rows).unwrap();
    let (loss, parts) = model.loss(&mut tape, &out, &labels).unwrap();
    (parts.total, tape.backward(loss).unwrap())
}

#[test]
fn ntn_baseline_equals_reduced_tmn() {
    let d = 4;
    let t = table(5, d, 3);
    let ntn = Model::init(
        ModelSpec::Baseline {
            kind: BaselineKind::Ntn,
            dim: d,
            k: 5,
        },
        9,
    );
    let cfg = TmnConfig {
        dim: d,
        k: 5,
        lambdas: [0.0; 3],
        gating: false,
        scorers: [false, false, true],
    };
    let mut tmn = Model::init(ModelSpec::Tmn(cfg), 9);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut ntn_r = ntn.clone();
    randomize(&mut ntn_r.store, &mut r, 0.7);
    for slot in ntn_r.store.slots() {
        let id = tmn.store.id(&slot.name).unwrap();
        *tmn.store.get_mut(id) = slot.value.clone();
    }
    let (rows, _) = rows();
    assert_eq!(
        ntn_r.score_rows(&t, &rows).unwrap(),
        tmn.score_rows(&t, &rows).unwrap()
    );
    assert_eq!(ntn.store.slots().len(), tmn.store.slots().len());
}

#[test]
fn lambda_zero_keeps_auxiliary_weights_out_of_the_gradient() {
    let d = 3;
    let t = table(5, d, 4);
    let cfg = TmnConfig {
        dim: d,
        k: 3,
        lambdas: [0.0, 0.0, 0.0],
        gating: true,
        scorers: [true; 3],
    };
    let mut model = Model::init(ModelSpec::Tmn(cfg), 2);
    randomize(&mut model.store, &mut ChaCha8Rng::seed_from_u64(5), 0.6);
    let (_, grads) = loss_and_grads(&model, &t);
    for prefix in SCORER_PREFIX {
        let id = model.store.id(&format!("{prefix}.u")).unwrap();
        assert!(
            grads
                .get(id)
                .is_none_or(|g| g.data().iter().all(|&v| v == 0.0)),
            "{prefix}.u"
        );
        let w = model.store.id(&format!("{prefix}.W")).unwrap();
        assert!(
            grads
                .get(w)
                .is_some_and(|g| g.data().iter().any(|&v| v != 0.0)),
            "{prefix}.W gets primal gradient"
        );
    }

    let cfg1 = TmnConfig {
        dim: d,
        k: 3,
        lambdas: [1.0, 0.0, 0.0],
        gating: true,
        scorers: [true; 3],
    };
    let mut model1 = Model::init(ModelSpec::Tmn(cfg1), 2);
    model1.store = model.store.clone();
    let (_, grads1) = loss_and_grads(&model1, &t);
    let id = model1.store.id("query_parent.u").unwrap();
    assert!(grads1
        .get(id)
        .is_some_and(|g| g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn joint_loss_reduces_to_primal_when_lambdas_vanish() {
    let d = 3;
    let t = table(5, d, 8);
    let cfg = TmnConfig {
        dim: d,
        k: 2,
        lambdas: [0.0; 3],
        gating: false,
        scorers: [true; 3],
    };
    let mut model = Model::init(ModelSpec::Tmn(cfg), 1);
    randomize(&mut model.store, &mut ChaCha8Rng::seed_from_u64(2), 0.5);
    let (rows, labels) = rows();
    let mut tape = Tape::new(&model.store);
    let out = model.forward(&mut tape, &t, &rows).unwrap();
    let (_, parts) = model.loss(&mut tape, &out, &labels).unwrap();
    assert_eq!(parts.total, parts.primal);
    assert!(parts.total >= 0.0);
}

#[test]
fn zero_initialized_projections_give_log_two() {
    let d = 4;
    let t = table(5, d, 1);
    let model = Model::init(ModelSpec::Tmn(TmnConfig::new(d)), 0);
    let (loss, _) = loss_and_grads(&model, &t);
    assert!((loss - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
}
