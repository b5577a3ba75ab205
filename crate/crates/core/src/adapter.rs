//! The affine map `g(x) = Wx + b` applied on top of a frozen encoder output.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{LluError, Result};
use crate::rng::CounterRng;
use crate::vector::check_dim;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineAdapter {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// JSON form: `{dim, W: row-major flat array, b}`.
#[derive(Serialize, Deserialize)]
struct AdapterRepr {
    dim: usize,
    #[serde(rename = "W")]
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Serialize for AffineAdapter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        AdapterRepr {
            dim: self.dim(),
            w: self.weight.iter().copied().collect(),
            b: self.bias.to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineAdapter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = AdapterRepr::deserialize(d)?;
        let weight = Array2::from_shape_vec((repr.dim, repr.dim), repr.w)
            .map_err(|e| serde::de::Error::custom(format!("W: {e}")))?;
        AffineAdapter::from_parts(weight, Array1::from(repr.b)).map_err(serde::de::Error::custom)
    }
}

impl AffineAdapter {
    pub fn identity(dim: usize) -> Self {
        AffineAdapter {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    /// I.i.d. Gaussian weights with standard deviation `1/sqrt(dim)`, zero bias.
    pub fn random(dim: usize, rng: &mut CounterRng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let w = (0..dim * dim).map(|_| rng.gaussian() * scale).collect();
        AffineAdapter {
            weight: Array2::from_shape_vec((dim, dim), w).unwrap(),
            bias: Array1::zeros(dim),
        }
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let (rows, cols) = weight.dim();
        if rows != cols {
            return Err(LluError::InvalidConfig(format!("W must be square, got {rows}x{cols}")));
        }
        check_dim(rows, bias.len())?;
        if weight.iter().chain(bias.iter()).any(|x| !x.is_finite()) {
            return Err(LluError::InvalidConfig("adapter has non-finite entries".into()));
        }
        Ok(AffineAdapter { weight, bias })
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.weight, &mut self.bias)
    }

    /// `W u + b`, not renormalized.
    pub fn apply(&self, u: &[f64]) -> Result<Array1<f64>> {
        check_dim(self.dim(), u.len())?;
        let u = ndarray::ArrayView1::from(u);
        Ok(self.weight.dot(&u) + &self.bias)
    }

    /// `||W - I||_F^2 + ||b||^2`.
    fn squared_distance(&self) -> f64 {
        let mut acc = 0.0;
        for ((r, c), w) in self.weight.indexed_iter() {
            let d = if r == c { w - 1.0 } else { *w };
            acc += d * d;
        }
        acc + self.bias.iter().map(|b| b * b).sum::<f64>()
    }

    /// Identity regularizer `lambda * (||W - I||_F^2 + ||b||^2)`.
    pub fn reg_penalty(&self, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        lambda * self.squared_distance()
    }

    /// Gradient of [`reg_penalty`](Self::reg_penalty): `(2 lambda (W - I), 2 lambda b)`.
    pub fn reg_gradient(&self, lambda: f64) -> (Array2<f64>, Array1<f64>) {
        let mut dw = &self.weight - &Array2::<f64>::eye(self.dim());
        dw *= 2.0 * lambda;
        let db = &self.bias * (2.0 * lambda);
        (dw, db)
    }

    /// `||W - I||_F + ||b||`, unsquared, for reporting.
    pub fn distance_to_identity(&self) -> f64 {
        let mut w_sq = 0.0;
        for ((r, c), w) in self.weight.indexed_iter() {
            let d = if r == c { w - 1.0 } else { *w };
            w_sq += d * d;
        }
        w_sq.sqrt() + self.bias.iter().map(|b| b * b).sum::<f64>().sqrt()
    }

    pub fn is_identity(&self) -> bool {
        self.squared_distance() == 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|x| x.is_finite())
    }

    /// Number of scalar parameters, `dim^2 + dim`.
    pub fn num_params(&self) -> usize {
        self.dim() * self.dim() + self.dim()
    }

    /// Parameter `idx` in the order: W row-major, then b.
    pub fn param(&self, idx: usize) -> f64 {
        let d = self.dim();
        if idx < d * d {
            self.weight[[idx / d, idx % d]]
        } else {
            self.bias[idx - d * d]
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let d = self.dim();
        if idx < d * d {
            self.weight[[idx / d, idx % d]] = value;
        } else {
            self.bias[idx - d * d] = value;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::normalize;
    use proptest::prelude::*;

    fn perturbed(dim: usize, seed: u64, scale: f64) -> AffineAdapter {
        let mut rng = CounterRng::new(seed);
        let mut a = AffineAdapter::identity(dim);
        for i in 0..a.num_params() {
            let v = a.param(i) + scale * rng.gaussian();
            a.set_param(i, v);
        }
        a
    }

    #[test]
    fn identity_properties() {
        let a = AffineAdapter::identity(3);
        let trace: f64 = (0..3).map(|i| a.weight()[[i, i]]).sum();
        assert_eq!(trace, 3.0);
        assert_eq!(a.reg_penalty(1e3), 0.0);
        assert_eq!(a.distance_to_identity(), 0.0);
        let u = normalize(&[0.2, -0.5, 0.7]).unwrap();
        assert_eq!(a.apply(u.as_slice()).unwrap().to_vec(), u.as_slice());
        let (dw, db) = a.reg_gradient(1e3);
        assert!(dw.iter().chain(db.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn apply_examples() {
        let u = normalize(&[0.6, 0.8]).unwrap();
        let two = AffineAdapter::from_parts(Array2::eye(2) * 2.0, Array1::zeros(2)).unwrap();
        assert_eq!(two.apply(u.as_slice()).unwrap().to_vec(), vec![1.2, 1.6]);

        let shift = AffineAdapter::from_parts(Array2::eye(2), Array1::from(vec![1.0, 0.0])).unwrap();
        assert_eq!(shift.apply(&[0.0, 1.0]).unwrap().to_vec(), vec![1.0, 1.0]);
        assert!(matches!(
            shift.apply(&[1.0, 0.0, 0.0]),
            Err(LluError::DimMismatch { .. })
        ));
    }

    #[test]
    fn reg_penalty_single_entry() {
        let mut a = AffineAdapter::identity(4);
        a.set_param(0, 1.1);
        // independent scalar evaluation: 1e3 * (1.1 - 1)^2
        let expected = 1e3 * (1.1f64 - 1.0).powi(2);
        assert!((a.reg_penalty(1e3) - expected).abs() < 1e-12);
        assert!((a.reg_penalty(1e3) - 10.0).abs() < 1e-9);
        assert_eq!(a.reg_penalty(0.0), 0.0);
    }

    #[test]
    fn distance_three_four_five() {
        let a = AffineAdapter::from_parts(Array2::eye(3), Array1::from(vec![0.3, 0.4, 0.0])).unwrap();
        assert!((a.distance_to_identity() - 0.5).abs() < 1e-15);
        let mut b = a.clone();
        b.set_param(9, 0.6);
        b.set_param(10, 0.8);
        assert!(b.distance_to_identity() > a.distance_to_identity());
    }

    #[test]
    fn reg_gradient_matches_finite_differences() {
        let lambda = 7.5;
        let h = 1e-5;
        for seed in 0..10 {
            let a = perturbed(4, seed, 0.3);
            let (dw, db) = a.reg_gradient(lambda);
            let analytic: Vec<f64> = dw.iter().chain(db.iter()).copied().collect();
            for (i, &g) in analytic.iter().enumerate() {
                let mut plus = a.clone();
                plus.set_param(i, a.param(i) + h);
                let mut minus = a.clone();
                minus.set_param(i, a.param(i) - h);
                let fd = (plus.reg_penalty(lambda) - minus.reg_penalty(lambda)) / (2.0 * h);
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-6, "seed {seed} coord {i}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn reg_gradient_is_linear_in_lambda() {
        let a = perturbed(3, 11, 0.2);
        let (w1, b1) = a.reg_gradient(2.0);
        let (w2, b2) = a.reg_gradient(4.0);
        for (x, y) in w1.iter().chain(b1.iter()).zip(w2.iter().chain(b2.iter())) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn json_is_row_major() {
        let mut a = AffineAdapter::identity(2);
        a.set_param(1, 0.25);
        let json = serde_json::to_value(&a).unwrap();
        assert_eq!(json["W"], serde_json::json!([1.0, 0.25, 0.0, 1.0]));
        let back: AffineAdapter = serde_json::from_value(json).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<AffineAdapter>(r#"{"dim":2,"W":[1,0,0],"b":[0,0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn apply_is_affine(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let a = perturbed(5, seed, 0.5);
            let mut rng = CounterRng::new(seed + 1);
            let u = rng.gaussian_vec(5);
            let v = rng.gaussian_vec(5);
            let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| alpha * x + beta * y).collect();
            let lhs = a.apply(&mix).unwrap();
            let rhs = a.apply(&u).unwrap() * alpha + a.apply(&v).unwrap() * beta
                + a.bias() * (1.0 - alpha - beta);
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn penalty_is_zero_only_at_identity(seed in 0u64..1000, scale in 0.0f64..1.0) {
            let a = perturbed(3, seed, scale);
            let p = a.reg_penalty(3.0);
            prop_assert!(p >= 0.0);
            prop_assert_eq!(p == 0.0, a.is_identity());
        }
    }
}
