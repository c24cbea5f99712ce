//! Plain-loop reference implementations and fixtures shared by integration tests.
#![allow(dead_code)]

use qagen_core::corpus::{EmbeddingTable, Vocab, BOS_ID, EOS_ID};
use qagen_core::egcvae::{CvaeConfig, DataShape, EgCvae, Passes, PreparedPair};
use qagen_core::numerics::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(store.id(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x W + b` with explicit loops.
pub fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(rows, x.len());
    (0..cols)
        .map(|j| {
            let mut s = b.data()[j];
            for i in 0..rows {
                s += x[i] * w.data()[i * cols + j];
            }
            s
        })
        .collect()
}

pub fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols)
        .map(|j| x.iter().enumerate().map(|(i, v)| v * w.data()[i * cols + j]).sum())
        .collect()
}

pub fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    affine(x, param(store, &format!("{name}.w")), param(store, &format!("{name}.b")))
}

pub fn mlp(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(store, &format!("{name}.hidden"), x).iter().map(|v| v.tanh()).collect();
    linear(store, &format!("{name}.out"), &h)
}

fn gate(store: &ParamStore, name: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let xi = linear(store, name, x);
    let hu = vecmat(h, param(store, &format!("{name}.u")));
    xi.iter().zip(hu).map(|(a, b)| a + b).collect()
}

/// Scalar GRU step, element by element.
pub fn gru_step(store: &ParamStore, name: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = gate(store, &format!("{name}.reset"), x, h).into_iter().map(sigmoid).collect();
    let u: Vec<f64> = gate(store, &format!("{name}.update"), x, h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let n: Vec<f64> = gate(store, &format!("{name}.cand"), x, &rh).into_iter().map(f64::tanh).collect();
    (0..h.len()).map(|i| u[i] * h[i] + (1.0 - u[i]) * n[i]).collect()
}

/// Scalar LSTM step returning `(h, c)`.
pub fn lstm_step(store: &ParamStore, name: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let i: Vec<f64> = gate(store, &format!("{name}.input"), x, h).into_iter().map(sigmoid).collect();
    let f: Vec<f64> = gate(store, &format!("{name}.forget"), x, h).into_iter().map(sigmoid).collect();
    let g: Vec<f64> = gate(store, &format!("{name}.cell"), x, h).into_iter().map(f64::tanh).collect();
    let o: Vec<f64> = gate(store, &format!("{name}.output"), x, h).into_iter().map(sigmoid).collect();
    let c2: Vec<f64> = (0..c.len()).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
    let h2 = (0..c.len()).map(|k| o[k] * c2[k].tanh()).collect();
    (h2, c2)
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn encode_phrase(store: &ParamStore, table: &EmbeddingTable, ids: &[usize], hidden: usize) -> Vec<f64> {
    let mut hf = vec![0.0; hidden];
    for &i in ids {
        hf = gru_step(store, "cvae.phrase.fwd", table.vector(i), &hf);
    }
    let mut hb = vec![0.0; hidden];
    for &i in ids.iter().rev() {
        hb = gru_step(store, "cvae.phrase.bwd", table.vector(i), &hb);
    }
    cat(&[&hf, &hb])
}

pub fn condition(store: &ParamStore, cfg: &CvaeConfig, table: &EmbeddingTable, pair: &PreparedPair, k: usize) -> Vec<f64> {
    let mut h = vec![0.0; cfg.context_hidden];
    for (j, p) in pair.phrases.iter().enumerate() {
        if j != k {
            let e = encode_phrase(store, table, p, cfg.encoder_hidden);
            h = gru_step(store, "cvae.context", &e, &h);
        }
    }
    cat(&[&h, &pair.answer])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleLoss {
    pub kl: f64,
    pub type_ll: f64,
    pub entity_ll: f64,
    pub recon_ll: f64,
    pub bow_ll: f64,
    pub total: f64,
}

/// Independent evaluation of the three nested objectives.
///
/// `Passes::CVAE`: `w KL - log p(x|z,c) - b BOW`; `Passes::TYPED` adds `-log p(t|z,c)`;
/// `Passes::FULL` adds `-log p(e|z,c,t)`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_loss(
    model: &EgCvae,
    table: &EmbeddingTable,
    pair: &PreparedPair,
    k: usize,
    eps: &[f64],
    kl_weight: f64,
    bow_weight: f64,
    passes: Passes,
) -> OracleLoss {
    let s = model.store();
    let cfg = model.config();
    let shape = model.shape();
    let zdim = cfg.latent;
    let c = condition(s, cfg, table, pair, k);
    let x = encode_phrase(s, table, &pair.phrases[k], cfg.encoder_hidden);
    let t_teacher = pair.type_vectors[k].clone();
    let t_zero = vec![0.0; shape.type_dim];
    let t_for_x = if passes.type_pass { &t_teacher } else { &t_zero };
    let x_in = if cfg.recognition_uses_type { cat(&[&x, t_for_x]) } else { x };
    let q = linear(s, "cvae.recognition", &cat(&[&x_in, &c]));
    let p = mlp(s, "cvae.prior", &c);
    let (qm, qv) = (&q[..zdim], &q[zdim..]);
    let (pm, pv) = (&p[..zdim], &p[zdim..]);
    let z: Vec<f64> = (0..zdim).map(|i| qm[i] + (qv[i] / 2.0).exp() * eps[i]).collect();
    let mut kl = 0.0;
    for i in 0..zdim {
        // log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2
        let sq2 = qv[i].exp();
        let sp2 = pv[i].exp();
        kl += 0.5 * (sp2 / sq2).ln() + (sq2 + (qm[i] - pm[i]).powi(2)) / (2.0 * sp2) - 0.5;
    }
    let zc = cat(&[&z, &c]);

    let mut type_ll = 0.0;
    let t_used = if passes.type_pass {
        let t_pred = mlp(s, "cvae.type", &zc);
        type_ll = -t_pred.iter().zip(&t_teacher).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        t_teacher.clone()
    } else {
        t_zero.clone()
    };

    let n_ent = shape.num_entities + 1;
    let emb = param(s, "cvae.entity_embedding");
    let mut target = vec![0.0; n_ent];
    for &(i, w) in &pair.entity_targets[k] {
        target[i] += w;
    }
    let mut entity_ll = 0.0;
    let e_used = if passes.entity_pass {
        let lp = log_softmax(&mlp(s, "cvae.entity", &cat(&[&z, &c, &t_used])));
        entity_ll = (0..n_ent).map(|i| target[i] * lp[i]).sum();
        vecmat(&target, emb)
    } else {
        vec![0.0; cfg.entity_dim]
    };

    let mut h = linear(s, "cvae.init", &cat(&[&z, &c, &t_used, &e_used]));
    let mut prev = BOS_ID;
    let mut recon_ll = 0.0;
    for &y in pair.phrases[k].iter().chain(std::iter::once(&EOS_ID)) {
        h = gru_step(s, "cvae.decoder", &cat(&[table.vector(prev), &t_used, &e_used]), &h);
        recon_ll += log_softmax(&linear(s, "cvae.output", &h))[y];
        prev = y;
    }

    let bow_ll = if bow_weight != 0.0 {
        let lp = log_softmax(&mlp(s, "cvae.bow", &zc));
        pair.phrases[k].iter().map(|&w| lp[w]).sum()
    } else {
        0.0
    };
    let total = kl_weight * kl - type_ll - entity_ll - recon_ll - bow_weight * bow_ll;
    OracleLoss {
        kl,
        type_ll,
        entity_ll,
        recon_ll,
        bow_ll,
        total,
    }
}

/// Five-token vocabulary (three specials plus two words), random 3-d embeddings.
pub fn micro_table(seed: u64) -> EmbeddingTable {
    let vocab = Vocab::from(vec!["fever".to_string(), "cough".to_string()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Tensor::uniform(&[vocab.len(), 3], 1.0, &mut rng).into_data();
    EmbeddingTable::new(vocab, 3, data).unwrap()
}

pub fn micro_config() -> CvaeConfig {
    CvaeConfig {
        encoder_hidden: 2,
        context_hidden: 2,
        latent: 2,
        mlp_hidden: 2,
        decoder_hidden: 2,
        entity_dim: 2,
        recognition_uses_type: true,
        passes: Passes::FULL,
    }
}

pub fn micro_shape(table: &EmbeddingTable) -> DataShape {
    DataShape {
        embedding_dim: table.dim(),
        type_dim: 2,
        vocab_size: table.len(),
        num_entities: 2,
    }
}

/// Micro model with weights spread beyond the default init so every nonlinearity matters.
pub fn micro_model(table: &EmbeddingTable, cfg: &CvaeConfig, seed: u64) -> EgCvae {
    let mut model = EgCvae::new(cfg, micro_shape(table), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let store = model.store_mut();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(&shape, 0.6, &mut rng);
    }
    model
}

pub fn micro_pair() -> PreparedPair {
    PreparedPair {
        id: "micro".into(),
        phrases: vec![vec![3, 4], vec![4], vec![3, 3, 4]],
        answer: vec![0.2, -0.4, 0.1],
        type_vectors: vec![vec![0.3, -0.2], vec![0.5, 0.1], vec![-0.4, 0.6]],
        entity_targets: vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 1.0)], vec![(1, 1.0)]],
    }
}
