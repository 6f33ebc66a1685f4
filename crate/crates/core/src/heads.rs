//! Task heads: a linear classifier for supervised runs and a
//! prototype/cosine head for episodes.

use crate::error::{Error, Result};
use crate::graph::softmax_rows_value;
use crate::nn::{LinearParams, ParamClass, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F: Scalar> {
    pub classifier: LinearParams<F>,
}

impl<F: Scalar> HeadParams<F> {
    pub fn init(embedding_dim: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            classifier: LinearParams::init(embedding_dim, n_classes, rng),
        }
    }

    pub fn visit(&self, f: &mut ParamVisitor<'_, F>) {
        self.classifier
            .visit("head.classifier", ParamClass::HeadWeight, ParamClass::HeadBias, f);
    }

    pub fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_, F>) {
        self.classifier
            .visit_mut("head.classifier", ParamClass::HeadWeight, ParamClass::HeadBias, f);
    }

    pub fn cast<G: Scalar>(&self) -> HeadParams<G> {
        HeadParams {
            classifier: self.classifier.cast(),
        }
    }
}

/// Affine class logits for one embedding.
pub fn classify_supervised<F: Scalar>(embedding: &Tensor<F>, head: &HeadParams<F>) -> Vec<F> {
    let (i, o) = (head.classifier.in_dim(), head.classifier.out_dim());
    assert_eq!(embedding.numel(), i, "embedding dimension mismatch");
    let mut out = head.classifier.bias.data().to_vec();
    for (k, &xv) in embedding.data().iter().enumerate() {
        let row = &head.classifier.weight.data()[k * o..(k + 1) * o];
        for (ov, &wv) in out.iter_mut().zip(row) {
            *ov = *ov + xv * wv;
        }
    }
    out
}

/// One prototype per class position: the plain mean of that class's
/// normalized support embeddings, deliberately not re-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes<F: Scalar> {
    /// `[N, d]`
    pub p: Tensor<F>,
}

/// `per_class[c]` holds the K*T embeddings of class position `c`.
pub fn build_prototypes<F: Scalar>(per_class: &[Vec<Tensor<F>>]) -> Result<Prototypes<F>> {
    if per_class.is_empty() {
        return Err(Error::Protocol("no classes to build prototypes for".into()));
    }
    let dim = per_class
        .iter()
        .flat_map(|c| c.first())
        .map(|t| t.numel())
        .next()
        .ok_or_else(|| Error::Protocol("class position 0 has no embeddings".into()))?;
    let mut data = Vec::with_capacity(per_class.len() * dim);
    for (position, embeddings) in per_class.iter().enumerate() {
        if embeddings.is_empty() {
            return Err(Error::Protocol(format!(
                "class position {} has no embeddings",
                position
            )));
        }
        let mut acc = vec![F::zero(); dim];
        for e in embeddings {
            assert_eq!(e.numel(), dim, "embedding dimension mismatch");
            for (a, &v) in acc.iter_mut().zip(e.data()) {
                *a = *a + v;
            }
        }
        let inv = F::one() / F::from_f64(embeddings.len() as f64);
        data.extend(acc.into_iter().map(|v| v * inv));
    }
    Ok(Prototypes {
        p: Tensor::from_vec(&[per_class.len(), dim], data),
    })
}

/// `a.b / (|a||b| + eps)` with a fixed guard for degenerate inputs.
pub fn cosine_similarity<F: Scalar>(a: &[F], b: &[F]) -> F {
    assert_eq!(a.len(), b.len());
    let dot: F = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<F>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<F>().sqrt();
    dot / (na * nb + F::from_f64(COSINE_EPS))
}

/// Nearest-prototype prediction with temperature-scaled cosine-softmax
/// probabilities. Ties resolve to the lowest class position.
pub fn predict_query<F: Scalar>(
    query_embedding: &Tensor<F>,
    prototypes: &Prototypes<F>,
    tau: F,
) -> (usize, Vec<F>) {
    let n = prototypes.p.rows();
    assert!(n >= 2, "prediction needs at least two prototypes");
    let sims: Vec<F> = (0..n)
        .map(|c| cosine_similarity(query_embedding.data(), prototypes.p.row(c)))
        .collect();
    let mut best = 0;
    for (c, &s) in sims.iter().enumerate() {
        if s > sims[best] {
            best = c;
        }
    }
    let logits: Vec<F> = sims.iter().map(|&s| tau * s).collect();
    let probs = softmax_rows_value(&Tensor::from_vec(&[1, n], logits)).into_data();
    (best, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Concern};

    #[test]
    fn zero_head_gives_uniform_logits() {
        let head = HeadParams {
            classifier: LinearParams::<f64>::zeros(8, 100),
        };
        let logits = classify_supervised(&Tensor::filled(&[8], 0.3), &head);
        assert_eq!(logits.len(), 100);
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argmax_shift_invariance() {
        let mut rng = stream(0, Concern::Init, 0);
        let head = HeadParams::<f64>::init(8, 10, &mut rng);
        let emb = crate::nn::fan_in_uniform(&[8], 1, &mut rng);
        let logits = classify_supervised(&emb, &head);
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let shifted: Vec<f64> = logits.iter().map(|&v| v + 5.0).collect();
        assert_eq!(argmax(&logits), argmax(&shifted));
    }

    #[test]
    fn prototype_identity_and_symmetry() {
        let v = Tensor::vector(&[0.6, -0.8]);
        let single = build_prototypes(&[vec![v.clone()], vec![v.map(|x| -x)]]).unwrap();
        assert_eq!(single.p.row(0), v.data());

        let sym = build_prototypes(&[vec![v.clone(), v.map(|x| -x)], vec![v.clone()]]).unwrap();
        assert!(sym.p.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn prototype_matches_independent_summation() {
        let mut rng = stream(1, Concern::GradCheck, 0);
        let embeddings: Vec<Tensor<f64>> = (0..4)
            .map(|_| crate::nn::fan_in_uniform(&[5], 1, &mut rng))
            .collect();
        let protos = build_prototypes(&[embeddings.clone()]).unwrap();
        // independent accumulation in a different order
        let mut expected = vec![0.0f64; 5];
        for e in embeddings.iter().rev() {
            for (acc, &v) in expected.iter_mut().zip(e.data()) {
                *acc += v / 4.0;
            }
        }
        for (got, want) in protos.p.row(0).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_class_is_a_protocol_error() {
        let v = Tensor::vector(&[1.0f64]);
        assert!(build_prototypes(&[vec![v], vec![]]).is_err());
    }

    #[test]
    fn cosine_hand_values() {
        assert!((cosine_similarity(&[3.0f64, 4.0], &[3.0, 4.0]) - 1.0).abs() < 1e-9);
        assert!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).abs() < 1e-12);
        let c = cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]);
        assert!((c - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn predict_closed_form_probability() {
        let protos = Prototypes {
            p: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        };
        // query equal to prototype 0: sims [1, 0]
        let (pred, probs) = predict_query(&Tensor::vector(&[1.0, 0.0]), &protos, 15.0);
        assert_eq!(pred, 0);
        let expected = 1.0 / (1.0 + (-15.0f64).exp());
        assert!((probs[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn ties_resolve_to_lowest_position() {
        let protos = Prototypes {
            p: Tensor::from_vec(&[3, 2], vec![1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0]),
        };
        let (pred, probs) = predict_query(&Tensor::vector(&[0.5f64, 0.5]), &protos, 15.0);
        assert_eq!(pred, 0);
        for &p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_zero_limit_keeps_argmax() {
        let protos = Prototypes {
            p: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        };
        let q = Tensor::vector(&[0.9f64, 0.1]);
        let (pred_hot, _) = predict_query(&q, &protos, 15.0);
        let (pred_cold, probs) = predict_query(&q, &protos, 1e-12);
        assert_eq!(pred_hot, pred_cold);
        assert!((probs[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn prediction_is_scale_invariant() {
        let mut rng = stream(2, Concern::GradCheck, 0);
        let protos = Prototypes {
            p: crate::nn::fan_in_uniform(&[4, 6], 1, &mut rng),
        };
        for i in 0..20 {
            let q: Tensor<f64> = crate::nn::fan_in_uniform(&[6], 1, &mut rng);
            let (pred, probs) = predict_query(&q, &protos, 15.0);
            let scaled = q.map(|v| v * (1.0 + i as f64 * 10.0));
            let (pred_scaled, _) = predict_query(&scaled, &protos, 15.0);
            assert_eq!(pred, pred_scaled);
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(probs.iter().all(|&p| p > 0.0));
        }
    }
}
