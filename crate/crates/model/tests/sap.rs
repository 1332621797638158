//! SAP forward pass against a loop-by-loop re-implementation, plus its
//! structural properties.

use hoi_autograd::Tensor;
use hoi_core::BBox;
use hoi_model::params::ParamSet;
use hoi_model::sap::{self, SapConfig, SapInputs};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect())
}

struct Case {
    f_h: Tensor,
    f_o: Tensor,
    f_img: Tensor,
    u: [f64; 7],
}

impl Case {
    fn new(cfg: &SapConfig, seed: u64, cells: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p2 = cfg.pool * cfg.pool;
        let h = BBox::from_corners(4.0, 6.0, 16.0, 30.0).unwrap();
        let o = BBox::from_corners(14.0, 12.0, 22.0, 19.0).unwrap();
        Self {
            f_h: random(&mut rng, p2, cfg.feature_dim),
            f_o: random(&mut rng, p2, cfg.feature_dim),
            f_img: random(&mut rng, cells, cfg.feature_dim),
            u: sap::spatial_vector(&h, &o),
        }
    }

    fn inputs(&self) -> SapInputs<'_> {
        SapInputs {
            f_h: &self.f_h,
            f_o: &self.f_o,
            u: self.u,
            f_img: &self.f_img,
        }
    }
}

// ---- straight-line oracle -------------------------------------------------

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn affine(p: &ParamSet, w: &str, b: &str, x: &[f64]) -> Vec<f64> {
    let (w, b) = (p.tensor(w), p.tensor(b));
    (0..w.cols())
        .map(|j| b.get(0, j) + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>())
        .collect()
}

fn two_layer(p: &ParamSet, prefix: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(p, &format!("{prefix}.w1"), &format!("{prefix}.b1"), x)
        .into_iter()
        .map(gelu)
        .collect();
    affine(p, &format!("{prefix}.w2"), &format!("{prefix}.b2"), &h)
}

/// Returns `(f_inter, interactiveness, head-averaged attention)`.
fn oracle(cfg: &SapConfig, p: &ParamSet, c: &Case) -> (Vec<f64>, f64, Vec<f64>) {
    let mut concat = c.f_h.data().to_vec();
    concat.extend_from_slice(c.f_o.data());
    let merged = two_layer(p, "merge", &concat);

    let q = affine(p, "attn.wq", "attn.bq", &merged);
    let cells = c.f_img.rows();
    let keys: Vec<Vec<f64>> = (0..cells).map(|r| affine(p, "attn.wk", "attn.bk", c.f_img.row(r))).collect();
    let vals: Vec<Vec<f64>> = (0..cells).map(|r| affine(p, "attn.wv", "attn.bv", c.f_img.row(r))).collect();
    let dh = cfg.dim / cfg.heads;
    let mut heads_out = vec![0.0; cfg.dim];
    let mut avg = vec![0.0; cells];
    for h in 0..cfg.heads {
        let lo = h * dh;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| (lo..lo + dh).map(|j| q[j] * k[j]).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (r, ev) in e.iter().enumerate() {
            let a = ev / z;
            avg[r] += a / cfg.heads as f64;
            for j in lo..lo + dh {
                heads_out[j] += a * vals[r][j];
            }
        }
    }
    let attended = affine(p, "attn.wo", "attn.bo", &heads_out);

    let mut u = c.u.to_vec();
    u[0] = u[0].ln();
    u[1] = u[1].ln();
    let spatial = two_layer(p, "spatial", &u);
    let x: Vec<f64> = (0..cfg.dim).map(|j| merged[j] + attended[j] + spatial[j]).collect();
    let f_inter = two_layer(p, "out", &x);
    let logit = affine(p, "inter.w", "inter.b", &f_inter)[0];
    (f_inter, 1.0 / (1.0 + (-logit).exp()), avg)
}

// ---------------------------------------------------------------------------

fn noisy_params(cfg: &SapConfig, seed: u64) -> ParamSet {
    // Trained-looking magnitudes so every nonlinearity is exercised.
    let mut p = sap::init_params(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..=0.3);
        }
    }
    p
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matches_straight_line_oracle() {
    let cfg = SapConfig::default();
    let params = noisy_params(&cfg, 1);
    let case = Case::new(&cfg, 2, 48);
    let got = sap::evaluate(&cfg, &params, &case.inputs()).unwrap();
    let (f, s, att) = oracle(&cfg, &params, &case);
    assert!(close(&got.f_inter, &f, 1e-9));
    assert!((got.interactiveness - s).abs() < 1e-12);
    assert!(close(&got.attention, &att, 1e-12));
}

#[test]
fn golden_value_is_pinned() {
    let cfg = SapConfig::default();
    let params = sap::init_params(&cfg);
    let case = Case::new(&cfg, 5, 48);
    let got = sap::evaluate(&cfg, &params, &case.inputs()).unwrap();
    let (f, s, _) = oracle(&cfg, &params, &case);
    assert!(close(&got.f_inter, &f, 1e-12));
    assert!((got.interactiveness - s).abs() < 1e-15);
    let head: Vec<f64> = got.f_inter[..4].to_vec();
    let pinned = [
        -0.0006131964780628697,
        -0.0007563912774423377,
        -0.0003728655824503289,
        0.0011873540140106274,
    ];
    assert!(close(&head, &pinned, 1e-10), "{head:?}");
    assert!((got.interactiveness - 0.500030762198968).abs() < 1e-10);
}

#[test]
fn grid_permutation_leaves_output_unchanged() {
    let cfg = SapConfig::default();
    let params = noisy_params(&cfg, 3);
    let case = Case::new(&cfg, 4, 48);
    let before = sap::evaluate(&cfg, &params, &case.inputs()).unwrap();
    let mut order: Vec<usize> = (0..48).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let rows: Vec<f64> = order.iter().flat_map(|&r| case.f_img.row(r).to_vec()).collect();
    let shuffled = Case {
        f_img: Tensor::from_vec(48, cfg.feature_dim, rows),
        f_h: case.f_h.clone(),
        f_o: case.f_o.clone(),
        u: case.u,
    };
    let after = sap::evaluate(&cfg, &params, &shuffled.inputs()).unwrap();
    assert!(close(&before.f_inter, &after.f_inter, 1e-12));
    assert!((before.interactiveness - after.interactiveness).abs() < 1e-12);
    // Attention travels with its cell.
    for (k, &r) in order.iter().enumerate() {
        assert!((after.attention[k] - before.attention[r]).abs() < 1e-12);
    }
}

#[test]
fn attention_is_a_distribution() {
    let cfg = SapConfig::default();
    for seed in 0..20 {
        let params = noisy_params(&cfg, 100 + seed);
        let case = Case::new(&cfg, 200 + seed, 30);
        let a = sap::evaluate(&cfg, &params, &case.inputs()).unwrap().attention;
        assert_eq!(a.len(), 30);
        assert!(a.iter().all(|&w| w >= 0.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn uniform_keys_give_uniform_attention() {
    let cfg = SapConfig::default();
    let params = noisy_params(&cfg, 8);
    let mut case = Case::new(&cfg, 9, 12);
    case.f_img = Tensor::filled(12, cfg.feature_dim, 0.3);
    let a = sap::evaluate(&cfg, &params, &case.inputs()).unwrap().attention;
    assert!(a.iter().all(|&w| (w - 1.0 / 12.0).abs() < 1e-12));
}

#[test]
fn only_output_bias_left_gives_the_bias() {
    let cfg = SapConfig::default();
    let mut params = sap::init_params(&cfg);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let bias: Vec<f64> = (0..cfg.dim).map(|j| j as f64 / 10.0 - 3.0).collect();
    *params.get_mut("out.b2").unwrap() = Tensor::row_vector(bias.clone());
    let case = Case::new(&cfg, 1, 10);
    let got = sap::evaluate(&cfg, &params, &case.inputs()).unwrap();
    assert_eq!(got.f_inter, bias);
}

#[test]
fn zeroed_spatial_mlp_ignores_geometry() {
    let cfg = SapConfig::default();
    let mut params = noisy_params(&cfg, 4);
    for name in ["spatial.w1", "spatial.b1", "spatial.w2", "spatial.b2"] {
        params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let a = Case::new(&cfg, 6, 10);
    let mut b = Case::new(&cfg, 6, 10);
    b.u = sap::spatial_vector(
        &BBox::from_corners(0.0, 0.0, 5.0, 9.0).unwrap(),
        &BBox::from_corners(30.0, 30.0, 40.0, 33.0).unwrap(),
    );
    let ea = sap::evaluate(&cfg, &params, &a.inputs()).unwrap();
    let eb = sap::evaluate(&cfg, &params, &b.inputs()).unwrap();
    assert_eq!(ea.f_inter, eb.f_inter);
}

#[test]
fn wrong_shapes_are_rejected() {
    let cfg = SapConfig::default();
    let params = sap::init_params(&cfg);
    let mut case = Case::new(&cfg, 1, 10);
    case.f_h = Tensor::zeros(3, cfg.feature_dim);
    assert!(sap::evaluate(&cfg, &params, &case.inputs()).is_err());
}
