use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{encode, encoded_dim, EncodingConfig};
use super::FieldQuery;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DensityActivation {
    #[default]
    Softplus,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden layers in the position trunk.
    pub depth: usize,
    pub width: usize,
    /// Hidden width of the direction-conditioned color head.
    pub color_width: usize,
    pub encoding: EncodingConfig,
    pub density_activation: DensityActivation,
    /// Initial bias of the density output (before the activation).
    pub density_bias_init: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            color_width: 32,
            encoding: EncodingConfig::default(),
            density_activation: DensityActivation::Softplus,
            density_bias_init: 0.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.color_width == 0 {
            return Err(Error::Config(
                "model depth, width and color_width must be >= 1".into(),
            ));
        }
        if !self.density_bias_init.is_finite() {
            return Err(Error::Config(
                "model.density_bias_init must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of the neural radiance field, in a fixed order:
/// trunk layers, density head, feature layer, then the two color layers.
/// Weights are stored `[fan_in, fan_out]` so a layer is `x . W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralField {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

impl NeuralField {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization from
    /// `config.init_seed`, with the density bias set to `density_bias_init`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let enc = config.encoding;
        let in_pos = encoded_dim(enc.levels_position, enc.include_input);
        let in_dir = encoded_dim(enc.levels_direction, enc.include_input);
        let mut params = Vec::new();
        let mut linear = |name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b = (0..fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push((format!("{name}.weight"), Tensor::new([fan_in, fan_out], w)));
            params.push((format!("{name}.bias"), Tensor::new([fan_out], b)));
        };
        let mut fan_in = in_pos;
        for i in 0..config.depth {
            linear(&format!("trunk.{i}"), fan_in, config.width, &mut rng);
            fan_in = config.width;
        }
        linear("density", config.width, 1, &mut rng);
        linear("feature", config.width, config.width, &mut rng);
        linear(
            "color.0",
            config.width + in_dir,
            config.color_width,
            &mut rng,
        );
        linear("color.1", config.color_width, 3, &mut rng);
        let mut field = Self { config, params };
        field.param_mut("density.bias").unwrap().data_mut()[0] = config.density_bias_init;
        Ok(field)
    }

    /// Rebuilds a field from named tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::new(config)?;
        if template.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((name, t), (tn, tt)) in params.iter().zip(&template.params) {
            if name != tn || t.shape() != tt.shape() {
                return Err(Error::invalid(format!(
                    "parameter mismatch: got {name} {:?}, expected {tn} {:?}",
                    t.shape(),
                    tt.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Inserts every parameter as a grad-requiring leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundField<'_> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect();
        BoundField { field: self, vars }
    }

    /// Inserts the parameters as constants (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundField<'_> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| g.constant(t.clone()))
            .collect();
        BoundField { field: self, vars }
    }

    /// Attaches graph nodes created elsewhere, one per parameter in order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundField<'_> {
        assert_eq!(
            vars.len(),
            self.params.len(),
            "one var per parameter tensor"
        );
        BoundField { field: self, vars }
    }

    /// Evaluates one point. `d` must be unit length.
    pub fn eval(&self, x: Vec3, d: Vec3) -> Result<(f64, [f64; 3])> {
        if !x.is_finite() || !d.is_finite() {
            return Err(Error::invalid("field input must be finite"));
        }
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let xv = g.constant(Tensor::new([1, 3], x.0.to_vec()));
        let dv = g.constant(Tensor::new([1, 3], d.0.to_vec()));
        let (sigma, rgb) = bound.query(&mut g, xv, dv);
        let c = g.value(rgb).data();
        Ok((g.value(sigma).item(), [c[0], c[1], c[2]]))
    }
}

/// A [`NeuralField`] whose parameters live in a particular graph.
pub struct BoundField<'a> {
    field: &'a NeuralField,
    vars: Vec<Var>,
}

impl BoundField<'_> {
    /// Graph handles of the parameters, in [`NeuralField::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn field(&self) -> &NeuralField {
        self.field
    }

    fn linear(&self, g: &mut Graph, x: Var, layer: usize) -> Var {
        let (w, b) = (self.vars[2 * layer], self.vars[2 * layer + 1]);
        g.affine(x, w, b)
    }

    fn trunk(&self, g: &mut Graph, positions: Var) -> Var {
        let enc = self.field.config.encoding;
        let mut h = encode(g, positions, enc.levels_position, enc.include_input);
        for layer in 0..self.field.config.depth {
            let z = self.linear(g, h, layer);
            h = g.relu(z);
        }
        h
    }

    fn density(&self, g: &mut Graph, h: Var) -> Var {
        let raw = self.linear(g, h, self.field.config.depth);
        let n = g.shape(raw)[0];
        let raw = g.reshape(raw, [n]);
        match self.field.config.density_activation {
            DensityActivation::Softplus => g.softplus(raw),
            DensityActivation::Relu => g.relu(raw),
        }
    }
}

impl FieldQuery for BoundField<'_> {
    fn query(&self, g: &mut Graph, positions: Var, directions: Var) -> (Var, Var) {
        let depth = self.field.config.depth;
        let enc = self.field.config.encoding;
        let h = self.trunk(g, positions);
        let sigma = self.density(g, h);
        let feature = self.linear(g, h, depth + 1);
        let dir_enc = encode(g, directions, enc.levels_direction, enc.include_input);
        let joined = g.concat(&[feature, dir_enc], 1);
        let c0 = self.linear(g, joined, depth + 2);
        let c0 = g.relu(c0);
        let c1 = self.linear(g, c0, depth + 3);
        let rgb = g.sigmoid(c1);
        (sigma, rgb)
    }

    fn query_density(&self, g: &mut Graph, positions: Var) -> Var {
        let h = self.trunk(g, positions);
        self.density(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;

    fn tiny() -> ModelConfig {
        ModelConfig {
            depth: 2,
            width: 8,
            color_width: 4,
            encoding: EncodingConfig {
                levels_position: 3,
                levels_direction: 2,
                include_input: true,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn parameter_layout() {
        let f = NeuralField::new(tiny()).unwrap();
        let names: Vec<&str> = f.params().iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "trunk.0.weight",
                "trunk.0.bias",
                "trunk.1.weight",
                "trunk.1.bias",
                "density.weight",
                "density.bias",
                "feature.weight",
                "feature.bias",
                "color.0.weight",
                "color.0.bias",
                "color.1.weight",
                "color.1.bias",
            ]
        );
        assert_eq!(f.param("trunk.0.weight").unwrap().shape(), &[21, 8]);
        assert_eq!(f.param("color.0.weight").unwrap().shape(), &[8 + 15, 4]);
    }

    #[test]
    fn zero_density_head_gives_softplus_of_zero() {
        let mut f = NeuralField::new(tiny()).unwrap();
        f.param_mut("density.weight").unwrap().data_mut().fill(0.0);
        f.param_mut("density.bias").unwrap().data_mut().fill(0.0);
        for x in [
            Vec3::ZERO,
            Vec3::new(0.3, -0.8, 1.2),
            Vec3::new(-2.0, 0.1, 0.4),
        ] {
            let (sigma, _) = f.eval(x, Vec3::new(0.0, 0.0, -1.0)).unwrap();
            assert!((sigma - std::f64::consts::LN_2).abs() < 1e-15);
            assert!((sigma - 0.6931).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_color_head_is_mid_gray() {
        let mut f = NeuralField::new(tiny()).unwrap();
        f.param_mut("color.1.weight").unwrap().data_mut().fill(0.0);
        f.param_mut("color.1.bias").unwrap().data_mut().fill(0.0);
        let (_, c) = f
            .eval(Vec3::new(0.2, 0.1, 0.0), Vec3::new(1.0, 0.0, 0.0))
            .unwrap();
        assert_eq!(c, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let f = NeuralField::new(tiny()).unwrap();
        assert!(f
            .eval(Vec3::new(f64::NAN, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0))
            .is_err());
    }

    #[test]
    fn output_ranges_hold_for_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..200 {
            let mut f = NeuralField::new(ModelConfig {
                init_seed: seed,
                ..tiny()
            })
            .unwrap();
            for (_, t) in f.params_mut() {
                for v in t.data_mut() {
                    *v *= rng.random_range(0.5..20.0);
                }
            }
            for _ in 0..50 {
                let x = Vec3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                );
                let d = crate::geometry::random_unit_vector(&mut rng);
                let (s, c) = f.eval(x, d).unwrap();
                assert!(s >= 0.0);
                assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn sigma_gradient_wrt_first_layer_matches_finite_differences() {
        let f = NeuralField::new(tiny()).unwrap();
        let x = Tensor::new(
            [3, 3],
            vec![0.1, 0.2, -0.3, 0.5, -0.1, 0.05, -0.4, 0.3, 0.2],
        );
        let w0 = f.param("trunk.0.weight").unwrap().clone();
        let report = check_gradients(
            |g, vars| {
                let mut field = f.bind_frozen(g);
                field.vars[0] = vars[0];
                let xv = g.constant(x.clone());
                let s = field.query_density(g, xv);
                g.sum(s)
            },
            &[w0],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sigma_gradient_wrt_position_matches_finite_differences() {
        let f = NeuralField::new(tiny()).unwrap();
        let x = Tensor::new([2, 3], vec![0.1, 0.2, -0.3, 0.5, -0.1, 0.05]);
        let report = check_gradients(
            |g, vars| {
                let bound = f.bind_frozen(g);
                let s = bound.query_density(g, vars[0]);
                g.sum(s)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let f = NeuralField::new(tiny()).unwrap();
        let mut params = f.params().to_vec();
        params[0].1 = Tensor::zeros([2, 2]);
        assert!(NeuralField::from_params(f.config, params).is_err());
    }
}
