//! Segmentation stand-in: a two-layer pixel encoder, per-dataset heads for
//! warm-up, and the unified head that scores pixels against the unified
//! label embedding and maps the scores into each dataset's label space.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{ParamGroup, Trainable};
use crate::kernels::{argmax, cross_entropy_from_logits, matmul, matmul_bt, row_softmax, tanh_map, Matrix, Tape, Var};
use crate::taxonomy::MappingMatrix;

/// Pixels from one dataset: raw observations and per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBatch {
    pub dataset_id: usize,
    /// `pixels × D_obs`.
    pub observations: Matrix,
    pub labels: Vec<usize>,
}

impl PixelBatch {
    pub fn new(dataset_id: usize, observations: Matrix, labels: Vec<usize>) -> Result<Self> {
        if observations.rows() != labels.len() {
            return Err(Error::shape(
                "PixelBatch",
                observations.shape(),
                (labels.len(), observations.cols()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::Data("pixel batch is empty".into()));
        }
        Ok(PixelBatch {
            dataset_id,
            observations,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= classes) {
            Some(&y) => Err(Error::Index {
                index: y,
                len: classes,
                context: "pixel label",
            }),
            None => Ok(()),
        }
    }
}

/// `p = A₂ tanh(A₁ o)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `H × D_obs`.
    pub a1: Matrix,
    /// `D × H`.
    pub a2: Matrix,
}

impl EncoderParams {
    pub fn init<R: Rng>(rng: &mut R, d_obs: usize, hidden: usize, width: usize) -> Self {
        let s1 = 1.0 / (d_obs as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        EncoderParams {
            a1: Matrix::from_fn(hidden, d_obs, |_, _| rng.sample::<f64, _>(StandardNormal) * s1),
            a2: Matrix::from_fn(width, hidden, |_, _| rng.sample::<f64, _>(StandardNormal) * s2),
        }
    }

    pub fn width(&self) -> usize {
        self.a2.rows()
    }
}

/// One `|L_i| × D` head per training dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadParams {
    pub heads: Vec<Matrix>,
}

impl MultiHeadParams {
    pub fn zeros(sizes: &[usize], width: usize) -> Self {
        MultiHeadParams {
            heads: sizes.iter().map(|&s| Matrix::zeros(s, width)).collect(),
        }
    }

    pub fn head(&self, dataset: usize) -> Result<&Matrix> {
        self.heads
            .get(dataset)
            .ok_or_else(|| Error::Config(format!("no head for dataset {dataset}")))
    }
}

pub fn encode_pixels(batch: &PixelBatch, enc: &EncoderParams) -> Result<Matrix> {
    encode_observations(&batch.observations, enc)
}

pub fn encode_observations(obs: &Matrix, enc: &EncoderParams) -> Result<Matrix> {
    let hidden = tanh_map(&matmul_bt(obs, &enc.a1)?);
    matmul_bt(&hidden, &enc.a2)
}

/// Pixel-level argmax of a logit matrix.
pub fn predict(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows()).map(|r| logits.row_argmax(r)).collect()
}

pub fn multihead_logits(pixels: &Matrix, heads: &MultiHeadParams, dataset: usize) -> Result<Matrix> {
    matmul_bt(pixels, heads.head(dataset)?)
}

/// Mean cross-entropy of `W_i p` against the batch labels.
pub fn multihead_loss(pixels: &Matrix, batch: &PixelBatch, heads: &MultiHeadParams) -> Result<f64> {
    let logits = multihead_logits(pixels, heads, batch.dataset_id)?;
    mean_cross_entropy(&logits, &batch.labels)
}

/// `U = 𝒫 X_uᵀ`: one row of unified scores per pixel.
pub fn unified_logits(pixels: &Matrix, unified: &Matrix) -> Result<Matrix> {
    matmul_bt(pixels, unified)
}

/// A mapping from unified nodes into one dataset's classes.
#[derive(Clone, Copy, Debug)]
pub enum Mapping<'a> {
    Discrete(&'a MappingMatrix),
    /// That dataset's block of the normalized adjacency, `N × |L_i|`.
    Continuous(&'a Matrix),
}

impl Mapping<'_> {
    pub fn dense(&self) -> Matrix {
        match self {
            Mapping::Discrete(m) => m.to_matrix(),
            Mapping::Continuous(m) => (*m).clone(),
        }
    }
}

/// `S = U M`: merged classes receive the sum of their nodes' logits.
pub fn map_logits(unified: &Matrix, mapping: Mapping<'_>) -> Result<Matrix> {
    matmul(unified, &mapping.dense())
}

pub fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "cross-entropy",
            logits.shape(),
            (labels.len(), logits.cols()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Data("no pixels".into()));
    }
    let mut acc = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        acc += cross_entropy_from_logits(logits.row(r), y)?;
    }
    Ok(acc / labels.len() as f64)
}

pub fn mapped_ce_loss(scores: &Matrix, batch: &PixelBatch) -> Result<f64> {
    mean_cross_entropy(scores, &batch.labels)
}

/// `-Σᵢ softmax(X_u xᵢ)ᵢ ln softmax(X_u xᵢ)ᵢ`.
pub fn orthogonality_loss(unified: &Matrix) -> Result<f64> {
    let gram = matmul_bt(unified, unified)?;
    let p = row_softmax(&gram);
    let mut acc = 0.0;
    for i in 0..p.rows() {
        let pii = p.get(i, i);
        if pii > 0.0 {
            acc -= pii * pii.ln();
        }
    }
    Ok(acc)
}

pub fn combined_loss(ce: f64, orth: f64, lambda_ce: f64, lambda_orth: f64) -> f64 {
    lambda_ce * ce + lambda_orth * orth
}

/// Dataset class predicted through the winning unified node, or `None` when
/// that node maps to nothing in this dataset.
pub fn predict_via_nodes(unified_scores: &Matrix, mapping: &MappingMatrix) -> Vec<Option<usize>> {
    let assign = mapping.assignment();
    (0..unified_scores.rows())
        .map(|r| assign[argmax(unified_scores.row(r))])
        .collect()
}

/// Encoder weights as tape leaves.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub a1: Var,
    pub a2: Var,
}

impl EncoderVars {
    pub fn record(tape: &mut Tape, enc: &EncoderParams, trainable: &Trainable) -> Self {
        if trainable.contains(ParamGroup::Encoder) {
            EncoderVars {
                a1: tape.param(enc.a1.clone()),
                a2: tape.param(enc.a2.clone()),
            }
        } else {
            EncoderVars {
                a1: tape.constant(enc.a1.clone()),
                a2: tape.constant(enc.a2.clone()),
            }
        }
    }
}

pub fn encode_on_tape(tape: &mut Tape, obs: &Matrix, enc: EncoderVars) -> Result<Var> {
    let o = tape.constant(obs.clone());
    let pre = tape.matmul_bt(o, enc.a1)?;
    let hidden = tape.tanh(pre)?;
    tape.matmul_bt(hidden, enc.a2)
}

/// Records the orthogonality loss of `X_u` and returns the 1×1 result.
pub fn orthogonality_on_tape(tape: &mut Tape, unified: Var) -> Result<Var> {
    let gram = tape.matmul_bt(unified, unified)?;
    let p = tape.row_softmax(gram)?;
    tape.diag_entropy(p)
}

/// Records `λ₁ a + λ₂ b`.
pub fn combine_on_tape(tape: &mut Tape, a: Var, la: f64, b: Var, lb: f64) -> Result<Var> {
    let sa = tape.scale(a, la)?;
    let sb = tape.scale(b, lb)?;
    tape.add(sa, sb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::finite_difference_gradient;
    use crate::taxonomy::mapping_from_assignment;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_encoder_gives_zero_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = random(&mut rng, 4, 3);
        let enc = EncoderParams {
            a1: Matrix::zeros(5, 3),
            a2: Matrix::zeros(2, 5),
        };
        let p = encode_observations(&obs, &enc).unwrap();
        assert!(p.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_encoder_is_tanh() {
        let obs = Matrix::new(2, 3, vec![0.01, -0.02, 0.03, 0.0, 0.05, -0.01]).unwrap();
        let enc = EncoderParams {
            a1: Matrix::identity(3),
            a2: Matrix::identity(3),
        };
        let p = encode_observations(&obs, &enc).unwrap();
        for (a, b) in p.data().iter().zip(obs.data()) {
            assert!((a - b.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = random(&mut rng, 5, 3);
        let enc = EncoderParams::init(&mut rng, 3, 4, 2);
        let labels = vec![0, 1, 1, 0, 1];
        let loss_of = |e: &EncoderParams| {
            let p = encode_observations(&obs, e).unwrap();
            mean_cross_entropy(&p, &labels).unwrap()
        };
        let mut tape = Tape::new();
        let vars = EncoderVars::record(&mut tape, &enc, &Trainable::all());
        let p = encode_on_tape(&mut tape, &obs, vars).unwrap();
        let l = tape.mean_cross_entropy(p, &labels).unwrap();
        assert!((tape.scalar(l) - loss_of(&enc)).abs() < 1e-14);
        let g = tape.backward(l).unwrap();
        let num = finite_difference_gradient(
            |v| {
                let mut e = enc.clone();
                e.a1.data_mut().copy_from_slice(v);
                loss_of(&e)
            },
            enc.a1.data(),
            1e-5,
        )
        .unwrap();
        for (a, n) in g.get(vars.a1).unwrap().data().iter().zip(&num) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-3) < 1e-5);
        }
    }

    #[test]
    fn multihead_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random(&mut rng, 6, 4);
        let batch = PixelBatch::new(1, Matrix::zeros(6, 2), vec![0, 1, 2, 3, 4, 0]).unwrap();
        let heads = MultiHeadParams::zeros(&[2, 5], 4);
        let l = multihead_loss(&p, &batch, &heads).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);

        // Single pixel, head rows chosen so that W p = [1, 2, 3].
        let p = Matrix::new(1, 1, vec![1.0]).unwrap();
        let heads = MultiHeadParams {
            heads: vec![Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap()],
        };
        let batch = PixelBatch::new(0, Matrix::zeros(1, 1), vec![2]).unwrap();
        let l = multihead_loss(&p, &batch, &heads).unwrap();
        assert_eq!(l, cross_entropy_from_logits(&[1.0, 2.0, 3.0], 2).unwrap());

        let missing = PixelBatch::new(4, Matrix::zeros(1, 1), vec![0]).unwrap();
        assert!(matches!(multihead_loss(&p, &missing, &heads), Err(Error::Config(_))));
    }

    #[test]
    fn unified_logits_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xu = random(&mut rng, 3, 4);
        let u = unified_logits(&Matrix::zeros(2, 4), &xu).unwrap();
        assert!(u.data().iter().all(|v| *v == 0.0));
        let p = random(&mut rng, 2, 4);
        assert_eq!(unified_logits(&p, &Matrix::identity(4)).unwrap(), p);
        let u = unified_logits(&p, &xu).unwrap();
        for k in 0..2 {
            for n in 0..3 {
                let expect: f64 = (0..4).map(|d| xu.get(n, d) * p.get(k, d)).sum();
                assert!((u.get(k, n) - expect).abs() < 1e-14);
            }
        }
        assert!(unified_logits(&p, &Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn map_logits_examples() {
        let u = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let id = mapping_from_assignment(0, &[Some(0), Some(1), Some(2)], 3).unwrap();
        assert_eq!(map_logits(&u, Mapping::Discrete(&id)).unwrap(), u);

        let merged = mapping_from_assignment(0, &[Some(0), Some(0), Some(1)], 2).unwrap();
        let s = map_logits(&u, Mapping::Discrete(&merged)).unwrap();
        assert_eq!(s.get(0, 0), 3.0);
        assert_eq!(s.get(1, 1), 4.0);

        let block = Matrix::new(3, 2, vec![0.7, 0.3, 0.1, 0.9, 0.5, 0.5]).unwrap();
        let s = map_logits(&u, Mapping::Continuous(&block)).unwrap();
        for k in 0..2 {
            for c in 0..2 {
                let expect: f64 = (0..3).map(|n| u.get(k, n) * block.get(n, c)).sum();
                assert!((s.get(k, c) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mapped_ce_examples() {
        let batch = PixelBatch::new(0, Matrix::zeros(3, 1), vec![0, 1, 3]).unwrap();
        let l = mapped_ce_loss(&Matrix::filled(3, 4, 0.7), &batch).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let bad = PixelBatch::new(0, Matrix::zeros(1, 1), vec![7]).unwrap();
        assert!(matches!(
            mapped_ce_loss(&Matrix::zeros(1, 4), &bad),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn mapped_ce_equals_multihead_with_identity_mapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random(&mut rng, 7, 4);
        let xu = random(&mut rng, 3, 4);
        let batch = PixelBatch::new(0, Matrix::zeros(7, 1), vec![0, 1, 2, 2, 1, 0, 1]).unwrap();
        let id = mapping_from_assignment(0, &[Some(0), Some(1), Some(2)], 3).unwrap();
        let s = map_logits(&unified_logits(&p, &xu).unwrap(), Mapping::Discrete(&id)).unwrap();
        let heads = MultiHeadParams {
            heads: vec![xu.clone()],
        };
        let a = mapped_ce_loss(&s, &batch).unwrap();
        let b = multihead_loss(&p, &batch, &heads).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn orthogonality_examples() {
        let one = Matrix::new(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(orthogonality_loss(&one).unwrap(), 0.0);

        // Orthogonal pair with squared norm 10: p = e^10 / (e^10 + 1).
        let s = 10f64.sqrt();
        let two = Matrix::new(2, 2, vec![s, 0.0, 0.0, s]).unwrap();
        let p = 1.0 / (1.0 + (-10f64).exp());
        let expect = -2.0 * p * p.ln();
        assert!((orthogonality_loss(&two).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn orthogonality_decreases_with_scale_past_crossover() {
        // Orthogonal rows of norm r: p = e^{r²} / (e^{r²} + N - 1).
        let n = 4;
        let mut prev = f64::INFINITY;
        let mut crossed = false;
        for step in 1..40 {
            let r = step as f64 * 0.1;
            let xu = Matrix::identity(n).scale(r);
            let p = (r * r).exp() / ((r * r).exp() + (n - 1) as f64);
            let l = orthogonality_loss(&xu).unwrap();
            assert!((l + n as f64 * p * p.ln()).abs() < 1e-12);
            if p > (-1f64).exp() {
                if crossed {
                    assert!(l < prev);
                }
                crossed = true;
            }
            prev = l;
        }
        assert!(crossed);
        assert!(prev < 1e-3);
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(2.5, 9.0, 1.0, 0.0), 2.5);
        assert_eq!(combined_loss(2.5, 9.0, 0.0, 0.0), 0.0);
        assert_eq!(combined_loss(2.0, 3.0, 1.0, 0.5), 3.5);
    }

    #[test]
    fn boolean_continuous_block_matches_discrete() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random(&mut rng, 5, 4);
        let m = mapping_from_assignment(0, &[Some(1), None, Some(0), Some(1)], 2).unwrap();
        let dense = m.to_matrix();
        let a = map_logits(&u, Mapping::Discrete(&m)).unwrap();
        let b = map_logits(&u, Mapping::Continuous(&dense)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rows_can_be_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random(&mut rng, 6, 3);
        let xu = random(&mut rng, 4, 3);
        let m = mapping_from_assignment(0, &[Some(1), None, Some(0), None], 2).unwrap();
        let s = map_logits(&unified_logits(&p, &xu).unwrap(), Mapping::Discrete(&m)).unwrap();
        let keep = [0, 2];
        let s2 = map_logits(
            &unified_logits(&p, &xu.select_rows(&keep)).unwrap(),
            Mapping::Discrete(&m.select_nodes(&keep)),
        )
        .unwrap();
        assert_eq!(s, s2);
    }
}
