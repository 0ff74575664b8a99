//! Prototype learning: attribute vectors to identity prototypes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};

/// Two-layer perceptron `W2 relu(W1 a + b1) + b2`, stored row-major as
/// `w1: Q x hidden`, `w2: hidden x C` so a batch of attribute rows maps with
/// plain matrix products.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn new(w1: Tensor<T>, b1: Tensor<T>, w2: Tensor<T>, b2: Tensor<T>) -> Result<Self> {
        let ok = w1.rank() == 2
            && w2.rank() == 2
            && w1.shape()[1] == w2.shape()[0]
            && b1.shape() == [w1.shape()[1]]
            && b2.shape() == [w2.shape()[1]];
        if !ok {
            return Err(Error::dim(
                "mlp",
                format!(
                    "w1 {:?} b1 {:?} w2 {:?} b2 {:?}",
                    w1.shape(),
                    b1.shape(),
                    w2.shape(),
                    b2.shape()
                ),
            ));
        }
        Ok(MlpParams { w1, b1, w2, b2 })
    }

    /// Fan-in uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(inputs: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        MlpParams {
            w1: fan_in_uniform(vec![inputs, hidden], inputs, rng),
            b1: fan_in_uniform(vec![hidden], inputs, rng),
            w2: fan_in_uniform(vec![hidden, outputs], hidden, rng),
            b2: fan_in_uniform(vec![outputs], hidden, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.w2.shape()[1]
    }
}

pub fn fan_in_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeSource {
    Plm,
    FcWeights,
}

/// One prototype row per identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T = f32> {
    pub prototypes: Tensor<T>,
    pub identities: Vec<String>,
    pub source: PrototypeSource,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn new(prototypes: Tensor<T>, identities: Vec<String>, source: PrototypeSource) -> Result<Self> {
        if prototypes.rank() != 2 || prototypes.rows() != identities.len() {
            return Err(Error::dim(
                "prototype_set",
                format!("{:?} for {} identities", prototypes.shape(), identities.len()),
            ));
        }
        let mut sorted = identities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != identities.len() {
            return Err(Error::Argument("prototype identities must be unique".into()));
        }
        Ok(PrototypeSet {
            prototypes,
            identities,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.prototypes.row(i)
    }
}

/// Per-coordinate mean of image-level attribute vectors.
pub fn category_attribute<T: Scalar>(image_attrs: &[Vec<T>]) -> Result<Vec<T>> {
    let first = image_attrs
        .first()
        .ok_or_else(|| Error::Argument("category attribute of no images".into()))?;
    let q = first.len();
    if image_attrs.iter().any(|a| a.len() != q) {
        return Err(Error::dim("category_attribute", "attribute vectors differ in length"));
    }
    let n = T::from_usize(image_attrs.len()).unwrap();
    Ok((0..q)
        .map(|j| image_attrs.iter().map(|a| a[j]).sum::<T>() / n)
        .collect())
}

/// Tape handles of an [`MlpParams`].
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Maps an `N x Q` batch of attribute rows to `N x C` prototypes.
pub fn prototypes_on_tape<T: Scalar>(tape: &mut Tape<T>, attrs: Var, mlp: &MlpVars) -> Result<Var> {
    let hidden = tape.value(mlp.b1).len();
    let out = tape.value(mlp.b2).len();
    let h = tape.matmul(attrs, mlp.w1)?;
    let b1 = tape.reshape(mlp.b1, [1, hidden])?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h)?;
    let m = tape.matmul(h, mlp.w2)?;
    let b2 = tape.reshape(mlp.b2, [1, out])?;
    tape.add(m, b2)
}

impl<T: Scalar> MlpParams<T> {
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<MlpVars> {
        Ok(MlpVars {
            w1: tape.leaf(self.w1.clone(), trainable)?,
            b1: tape.leaf(self.b1.clone(), trainable)?,
            w2: tape.leaf(self.w2.clone(), trainable)?,
            b2: tape.leaf(self.b2.clone(), trainable)?,
        })
    }
}

/// `m = Phi(a)` for one category-level attribute vector.
pub fn prototype<T: Scalar>(attrs: &[T], params: &MlpParams<T>) -> Result<Vec<T>> {
    Ok(prototypes(&[attrs.to_vec()], params)?.into_data())
}

/// Prototypes for a batch of attribute vectors, one row each.
pub fn prototypes<T: Scalar>(attrs: &[Vec<T>], params: &MlpParams<T>) -> Result<Tensor<T>> {
    let batch = Tensor::from_rows(attrs)?;
    if batch.shape()[1] != params.inputs() {
        return Err(Error::dim(
            "prototype",
            format!("{} attributes against a {}-input perceptron", batch.shape()[1], params.inputs()),
        ));
    }
    let mut tape = Tape::new();
    let a = tape.constant(batch)?;
    let vars = params.bind(&mut tape, false)?;
    let m = prototypes_on_tape(&mut tape, a, &vars)?;
    Ok(tape.value(m).clone())
}

/// Classifier weight rows used directly as prototypes.
pub fn fc_prototypes<T: Scalar>(weights: &Tensor<T>, identities: Vec<String>) -> Result<PrototypeSet<T>> {
    PrototypeSet::new(weights.clone(), identities, PrototypeSource::FcWeights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn category_attribute_means() {
        assert_eq!(category_attribute(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(), vec![0.5, 0.0]);
        assert_eq!(category_attribute(&[vec![0.3, 1.0]]).unwrap(), vec![0.3, 1.0]);
        let v = vec![1.0, 0.0, 1.0];
        assert_eq!(category_attribute(&[v.clone(), v.clone(), v.clone()]).unwrap(), v);
        assert!(matches!(category_attribute::<f64>(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_perceptron_gives_zero_prototype() {
        let p = MlpParams::<f64>::new(
            Tensor::zeros(vec![3, 4]),
            Tensor::zeros(vec![4]),
            Tensor::zeros(vec![4, 5]),
            Tensor::zeros(vec![5]),
        )
        .unwrap();
        assert_eq!(prototype(&[1.0, 0.5, 0.0], &p).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn identity_perceptron_passes_nonnegative_input() {
        let p = MlpParams::<f64>::new(
            Tensor::identity(3),
            Tensor::zeros(vec![3]),
            Tensor::identity(3),
            Tensor::zeros(vec![3]),
        )
        .unwrap();
        assert_eq!(prototype(&[0.25, 1.0, 0.0], &p).unwrap(), vec![0.25, 1.0, 0.0]);
        assert!(matches!(prototype(&[1.0, 0.0], &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn perceptron_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = MlpParams::<f64>::init(4, 6, 3, &mut rng);
        let attrs = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.5, 1.0, 0.0, 1.0, 1.0, 0.25]).unwrap();
        let params = [mlp.w1, mlp.b1, mlp.w2, mlp.b2];
        let report = grad_check(
            |tape, v| {
                let a = tape.constant(attrs.clone())?;
                let vars = MlpVars { w1: v[0], b1: v[1], w2: v[2], b2: v[3] };
                let m = prototypes_on_tape(tape, a, &vars)?;
                let sq = tape.mul(m, m)?;
                tape.sum(sq)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn fc_rows_are_prototypes() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let set = fc_prototypes(&w, vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(set.source, PrototypeSource::FcWeights);
        assert_eq!(set.row(1), &[4.0, 5.0, 6.0]);
        let single = fc_prototypes(&Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap(), vec!["x".into()]).unwrap();
        assert_eq!(single.len(), 1);
        assert!(fc_prototypes(&w, vec!["a".into(), "a".into()]).is_err());
    }

    fn spectral_norm(t: &Tensor<f64>) -> f64 {
        // Power iteration on t^T t.
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut x = vec![1.0; c];
        for _ in 0..200 {
            let y: Vec<f64> = (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j] * x[j]).sum()).collect();
            let z: Vec<f64> = (0..c).map(|j| (0..r).map(|i| t.data()[i * c + j] * y[i]).sum()).collect();
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            x = z.iter().map(|v| v / n).collect();
        }
        let y: Vec<f64> = (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j] * x[j]).sum()).collect();
        y.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    proptest! {
        #[test]
        fn category_attribute_permutation_invariant(rows in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 5), 1..8)) {
            let mut rev = rows.clone();
            rev.reverse();
            let a = category_attribute(&rows).unwrap();
            let b = category_attribute(&rev).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!(a.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }

        #[test]
        fn prototype_is_lipschitz(seed in 0u64..500, delta in proptest::collection::vec(-0.1f64..0.1, 4)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mlp = MlpParams::<f64>::init(4, 5, 3, &mut rng);
            let a = vec![0.2, 0.9, 0.0, 1.0];
            let b: Vec<f64> = a.iter().zip(&delta).map(|(x, d)| x + d).collect();
            let ma = prototype(&a, &mlp).unwrap();
            let mb = prototype(&b, &mlp).unwrap();
            let dm = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let dd = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            let lip = spectral_norm(&mlp.w1) * spectral_norm(&mlp.w2);
            prop_assert!(dm <= lip * dd * (1.0 + 1e-6) + 1e-12);
        }
    }
}
