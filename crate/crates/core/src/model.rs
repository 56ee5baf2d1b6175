//! Tri-component network: feature extractor, classifier head, projector head.
//!
//! Student, teacher and bad teacher are all [`TriNet`]s with the same
//! [`NetConfig`]. The feature extractor is an MLP with ReLU after every
//! layer; both heads are single linear layers on the last hidden
//! representation and the projector output is L2-normalized.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub init_seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(ModelError::Config("input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(ModelError::Config("hidden_dims must be a nonempty list of positive sizes".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.embed_dim < 2 {
            return Err(ModelError::Config(format!("embed_dim must be >= 2, got {}", self.embed_dim)));
        }
        Ok(())
    }

    /// Same architecture, ignoring the init seed.
    pub fn same_architecture(&self, other: &NetConfig) -> bool {
        self.input_dim == other.input_dim
            && self.hidden_dims == other.hidden_dims
            && self.num_classes == other.num_classes
            && self.embed_dim == other.embed_dim
    }
}

/// Affine layer with weight `in x out` and bias `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
        let weight = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).expect("positive dims");
        let bias = Tensor::vector(draw(fan_out)).expect("positive dims");
        Self { weight, bias }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriNet {
    config: NetConfig,
    theta: Vec<Layer>,
    phi: Layer,
    psi: Layer,
}

/// Which head a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Theta,
    Phi,
    Psi,
}

impl Component {
    fn name(self) -> &'static str {
        match self {
            Component::Theta => "theta",
            Component::Phi => "phi",
            Component::Psi => "psi",
        }
    }
}

/// Parameters of a [`TriNet`] bound as leaves on a tape.
#[derive(Debug, Clone)]
pub struct NetVars {
    theta: Vec<(Var, Var)>,
    phi: (Var, Var),
    psi: (Var, Var),
}

impl NetVars {
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &self.theta {
            let z = tape.linear(h, w, b)?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    pub fn classify_features(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        Ok(tape.linear(feats, self.phi.0, self.phi.1)?)
    }

    pub fn project_features(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let z = tape.linear(feats, self.psi.0, self.psi.1)?;
        Ok(tape.l2_normalize(z)?)
    }

    /// Vars in the same order as [`TriNet::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(2 * self.theta.len() + 4);
        for &(w, b) in &self.theta {
            out.push(w);
            out.push(b);
        }
        out.extend([self.phi.0, self.phi.1, self.psi.0, self.psi.1]);
        out
    }
}

impl TriNet {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization seeded by
    /// `config.init_seed`.
    pub fn init(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut theta = Vec::with_capacity(config.hidden_dims.len());
        let mut fan_in = config.input_dim;
        for &h in &config.hidden_dims {
            theta.push(Layer::uniform(&mut rng, fan_in, h));
            fan_in = h;
        }
        let phi = Layer::uniform(&mut rng, fan_in, config.num_classes);
        let psi = Layer::uniform(&mut rng, fan_in, config.embed_dim);
        Ok(Self { config: config.clone(), theta, phi, psi })
    }

    /// Builds a net from explicit layers, checking them against `config`.
    pub fn from_layers(config: NetConfig, theta: Vec<Layer>, phi: Layer, psi: Layer) -> Result<Self> {
        config.validate()?;
        let mut fan_in = config.input_dim;
        let check = |l: &Layer, i: usize, o: usize, what: &str| {
            if l.weight.shape() != [i, o] || l.bias.shape() != [o] {
                Err(ModelError::Architecture(format!(
                    "{what}: expected weight [{i}, {o}] and bias [{o}], got {:?} and {:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )))
            } else {
                Ok(())
            }
        };
        if theta.len() != config.hidden_dims.len() {
            return Err(ModelError::Architecture(format!(
                "expected {} feature layers, got {}",
                config.hidden_dims.len(),
                theta.len()
            )));
        }
        for (i, (l, &h)) in theta.iter().zip(&config.hidden_dims).enumerate() {
            check(l, fan_in, h, &format!("theta.{i}"))?;
            fan_in = h;
        }
        check(&phi, fan_in, config.num_classes, "phi")?;
        check(&psi, fan_in, config.embed_dim, "psi")?;
        Ok(Self { config, theta, phi, psi })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn theta(&self) -> &[Layer] {
        &self.theta
    }

    pub fn phi(&self) -> &Layer {
        &self.phi
    }

    pub fn psi(&self) -> &Layer {
        &self.psi
    }

    pub fn bind(&self, tape: &mut Tape) -> NetVars {
        let mut leaf = |l: &Layer| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()));
        let theta = self.theta.iter().map(&mut leaf).collect();
        let phi = leaf(&self.phi);
        let psi = leaf(&self.psi);
        NetVars { theta, phi, psi }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "network input",
                left: x.shape().to_vec(),
                right: vec![self.config.input_dim],
            }
            .into());
        }
        Ok(())
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = vars.features(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Logits, shape `(n, C)`.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = vars.features(&mut tape, xv)?;
        let out = vars.classify_features(&mut tape, f)?;
        Ok(tape.value(out).clone())
    }

    /// Unit-norm embeddings, shape `(n, embed_dim)`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = vars.features(&mut tape, xv)?;
        let out = vars.project_features(&mut tape, f)?;
        Ok(tape.value(out).clone())
    }

    /// Logits and embeddings from one feature pass.
    pub fn classify_and_project(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = vars.features(&mut tape, xv)?;
        let logits = vars.classify_features(&mut tape, f)?;
        let z = vars.project_features(&mut tape, f)?;
        Ok((tape.value(logits).clone(), tape.value(z).clone()))
    }

    /// All parameter tensors: `theta.0.weight, theta.0.bias, ..., phi.weight,
    /// phi.bias, psi.weight, psi.bias`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.theta.len() + 4);
        for l in &self.theta {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([&self.phi.weight, &self.phi.bias, &self.psi.weight, &self.psi.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.theta.len() + 4);
        for l in &mut self.theta {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend([&mut self.phi.weight, &mut self.phi.bias, &mut self.psi.weight, &mut self.psi.bias]);
        out
    }

    /// `(component, layer index, "weight" | "bias")` for each entry of [`params`](Self::params).
    pub fn param_names(&self) -> Vec<(Component, usize, &'static str)> {
        let mut out = Vec::new();
        for i in 0..self.theta.len() {
            out.push((Component::Theta, i, "weight"));
            out.push((Component::Theta, i, "bias"));
        }
        out.extend([
            (Component::Phi, 0, "weight"),
            (Component::Phi, 0, "bias"),
            (Component::Psi, 0, "weight"),
            (Component::Psi, 0, "bias"),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Flat copy of every parameter, in [`params`](Self::params) order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Plain gradient step `p <- p - eta * g` over every bound parameter.
    pub fn sgd_step(&mut self, vars: &NetVars, grads: &tensor::Gradients, eta: f64) {
        for (p, v) in self.params_mut().into_iter().zip(vars.vars()) {
            if let Some(g) = grads.get(v) {
                for (a, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *a -= eta * d;
                }
            }
        }
    }

    /// Writes the text parameter container (see README for the layout).
    pub fn write_params<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.params_text().as_bytes())?;
        Ok(())
    }

    pub fn params_text(&self) -> String {
        let c = &self.config;
        let hidden: Vec<String> = c.hidden_dims.iter().map(|h| h.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "uniclun-params 1");
        let _ = writeln!(
            s,
            "config input_dim={} hidden_dims={} num_classes={} embed_dim={} init_seed={}",
            c.input_dim,
            hidden.join(","),
            c.num_classes,
            c.embed_dim,
            c.init_seed
        );
        for ((comp, idx, kind), p) in self.param_names().into_iter().zip(self.params()) {
            let dims: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "{}.{}.{} {}", comp.name(), idx, kind, dims.join(" "));
            let vals: Vec<String> = p.data().iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        let _ = writeln!(s, "end");
        s
    }

    /// Reads the container written by [`write_params`](Self::write_params).
    pub fn read_params<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines.next().transpose()?.ok_or_else(|| ModelError::Format("unexpected end of input".into()))
        };
        if next()?.trim() != "uniclun-params 1" {
            return Err(ModelError::Format("missing 'uniclun-params 1' header".into()));
        }
        let config = parse_config_line(&next()?)?;
        config.validate()?;
        let mut tensors = Vec::new();
        loop {
            let header = next()?;
            let header = header.trim();
            if header == "end" {
                break;
            }
            let mut parts = header.split_whitespace();
            let _name = parts.next().ok_or_else(|| ModelError::Format("empty tensor header".into()))?;
            let dims = parts
                .map(|d| d.parse::<usize>().map_err(|e| ModelError::Format(format!("bad dim '{d}': {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let values = next()?
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| ModelError::Format(format!("bad value '{v}': {e}"))))
                .collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(dims, values)?);
        }
        let n_theta = config.hidden_dims.len();
        if tensors.len() != 2 * n_theta + 4 {
            return Err(ModelError::Format(format!("expected {} tensors, got {}", 2 * n_theta + 4, tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut layer = || Layer { weight: it.next().expect("counted"), bias: it.next().expect("counted") };
        let theta = (0..n_theta).map(|_| layer()).collect();
        let phi = layer();
        let psi = layer();
        Self::from_layers(config, theta, phi, psi)
    }
}

fn parse_config_line(line: &str) -> Result<NetConfig> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("config") {
        return Err(ModelError::Format("missing config line".into()));
    }
    let (mut input_dim, mut hidden, mut classes, mut embed, mut seed) = (None, None, None, None, None);
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| ModelError::Format(format!("bad config entry '{kv}'")))?;
        let num = |s: &str| s.parse::<u64>().map_err(|e| ModelError::Format(format!("{k}: {e}")));
        match k {
            "input_dim" => input_dim = Some(num(v)? as usize),
            "hidden_dims" => {
                hidden = Some(v.split(',').map(|h| num(h).map(|x| x as usize)).collect::<Result<Vec<_>>>()?)
            }
            "num_classes" => classes = Some(num(v)? as usize),
            "embed_dim" => embed = Some(num(v)? as usize),
            "init_seed" => seed = Some(num(v)?),
            _ => return Err(ModelError::Format(format!("unknown config key '{k}'"))),
        }
    }
    let missing = |k: &str| ModelError::Format(format!("config line missing {k}"));
    Ok(NetConfig {
        input_dim: input_dim.ok_or_else(|| missing("input_dim"))?,
        hidden_dims: hidden.ok_or_else(|| missing("hidden_dims"))?,
        num_classes: classes.ok_or_else(|| missing("num_classes"))?,
        embed_dim: embed.ok_or_else(|| missing("embed_dim"))?,
        init_seed: seed.ok_or_else(|| missing("init_seed"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(hidden: Vec<usize>, classes: usize, seed: u64) -> NetConfig {
        NetConfig { input_dim: 3, hidden_dims: hidden, num_classes: classes, embed_dim: 4, init_seed: seed }
    }

    fn input(n: usize) -> Tensor {
        Tensor::matrix(n, 3, (0..n * 3).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = TriNet::init(&cfg(vec![8, 8], 4, 1)).unwrap();
        let b = TriNet::init(&cfg(vec![8, 8], 4, 1)).unwrap();
        let c = TriNet::init(&cfg(vec![8, 8], 4, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let net = TriNet::init(&cfg(vec![16, 9], 4, 3)).unwrap();
        let bound = |fan_in: f64| 1.0 / fan_in.sqrt();
        assert!(net.theta()[0].weight.data().iter().all(|v| v.abs() <= bound(3.0)));
        assert!(net.theta()[1].weight.data().iter().all(|v| v.abs() <= bound(16.0)));
        assert!(net.phi().weight.data().iter().all(|v| v.abs() <= bound(9.0)));
    }

    #[test]
    fn config_validation() {
        assert!(TriNet::init(&cfg(vec![8], 1, 0)).is_err());
        assert!(TriNet::init(&cfg(vec![], 3, 0)).is_err());
        let mut c = cfg(vec![8], 3, 0);
        c.embed_dim = 1;
        assert!(TriNet::init(&c).is_err());
    }

    #[test]
    fn output_shapes() {
        let net = TriNet::init(&cfg(vec![8, 8], 4, 0)).unwrap();
        let x = input(5);
        assert_eq!(net.classify(&x).unwrap().shape(), &[5, 4]);
        assert_eq!(net.features(&x).unwrap().shape(), &[5, 8]);
        assert_eq!(net.project(&x).unwrap().shape(), &[5, 4]);
        let bad = Tensor::zeros(&[2, 2]);
        assert!(net.classify(&bad).is_err());
    }

    #[test]
    fn zero_net_gives_zero_features_and_degenerate_projection() {
        let c = cfg(vec![2], 2, 0);
        let zero = |i, o| Layer { weight: Tensor::zeros(&[i, o]), bias: Tensor::zeros(&[o]) };
        let net = TriNet::from_layers(c, vec![zero(3, 2)], zero(2, 2), zero(2, 4)).unwrap();
        let x = input(3);
        assert!(net.features(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(net.project(&x), Err(ModelError::Tensor(TensorError::DegenerateRow { .. }))));
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        // theta: 2 -> 2 -> 2 layers, phi 2 -> 2, psi 2 -> 2
        let c = NetConfig { input_dim: 2, hidden_dims: vec![2, 2], num_classes: 2, embed_dim: 2, init_seed: 0 };
        let l = |w: &[&[f64]], b: &[f64]| Layer {
            weight: Tensor::from_rows(w).unwrap(),
            bias: Tensor::vector(b.to_vec()).unwrap(),
        };
        let net = TriNet::from_layers(
            c,
            vec![l(&[&[1.0, -1.0], &[2.0, 0.5]], &[0.0, 1.0]), l(&[&[1.0, 0.0], &[1.0, 1.0]], &[-1.0, 0.0])],
            l(&[&[1.0, 2.0], &[0.0, -1.0]], &[0.5, 0.0]),
            l(&[&[3.0, 0.0], &[0.0, 4.0]], &[0.0, 0.0]),
        )
        .unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        // layer 1: [1*1 + 2*2, 1*-1 + 2*0.5 + 1] = [5, 1] -> relu [5, 1]
        // layer 2: [5 + 1 - 1, 0 + 1] = [5, 1]
        assert_eq!(net.features(&x).unwrap().data(), &[5.0, 1.0]);
        // phi: [5*1 + 0.5, 5*2 - 1] = [5.5, 9]
        assert_eq!(net.classify(&x).unwrap().data(), &[5.5, 9.0]);
        // psi: [15, 4] / sqrt(241)
        let z = net.project(&x).unwrap();
        let n = 241f64.sqrt();
        assert!((z.data()[0] - 15.0 / n).abs() < 1e-15 && (z.data()[1] - 4.0 / n).abs() < 1e-15);
    }

    #[test]
    fn project_rows_are_unit_norm() {
        let net = TriNet::init(&cfg(vec![8, 8], 4, 5)).unwrap();
        let z = net.project(&input(20)).unwrap();
        for i in 0..20 {
            let n: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn clone_is_independent() {
        let mut net = TriNet::init(&cfg(vec![8], 3, 0)).unwrap();
        let copy = net.clone();
        assert_eq!(copy, net);
        let x = input(4);
        assert_eq!(copy.classify(&x).unwrap(), net.classify(&x).unwrap());
        net.params_mut()[0].data_mut()[0] += 1.0;
        assert_ne!(copy, net);
        assert_eq!(copy, TriNet::init(&cfg(vec![8], 3, 0)).unwrap());
    }

    #[test]
    fn classify_and_project_share_features() {
        let net = TriNet::init(&cfg(vec![8, 8], 4, 5)).unwrap();
        let x = input(6);
        let (l, z) = net.classify_and_project(&x).unwrap();
        assert_eq!(l, net.classify(&x).unwrap());
        assert_eq!(z, net.project(&x).unwrap());
    }

    #[test]
    fn params_text_round_trips_exactly() {
        let net = TriNet::init(&cfg(vec![5, 7], 3, 11)).unwrap();
        let text = net.params_text();
        let back = TriNet::read_params(text.as_bytes()).unwrap();
        assert_eq!(back, net);
        assert!(text.starts_with("uniclun-params 1\nconfig input_dim=3 hidden_dims=5,7"));
        assert!(TriNet::read_params("bogus\n".as_bytes()).is_err());
    }
}
