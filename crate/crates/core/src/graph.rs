//! Communication between neurons: at every timestep the `N` neuron states
//! form the token set of a multi-head attention.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::counter::{with_kind, MacKind};
use crate::tensor::{Element, Tensor};

/// How neurons exchange messages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommunicationMode {
    /// Routing weights from query/key attention.
    #[default]
    Learned,
    /// Every neuron receives the uniform average of all value projections.
    Static,
    /// No inter-neuron sublayer.
    None,
}

impl fmt::Display for CommunicationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommunicationMode::Learned => "learned",
            CommunicationMode::Static => "static",
            CommunicationMode::None => "none",
        })
    }
}

impl FromStr for CommunicationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(CommunicationMode::Learned),
            "static" => Ok(CommunicationMode::Static),
            "none" => Ok(CommunicationMode::None),
            other => Err(Error::Config(format!("unknown communication mode {other:?}"))),
        }
    }
}

/// Projections of the neuron attention. Query and key projections are absent
/// in static mode, where routing is fixed.
#[derive(Clone, Debug)]
pub struct AttentionParams<T: Element = f32> {
    pub w_q: Option<Tensor<T>>,
    pub w_k: Option<Tensor<T>>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub n_heads: usize,
}

impl<T: Element> AttentionParams<T> {
    pub fn init<R: Rng + ?Sized>(
        d_model: usize,
        n_heads: usize,
        mode: CommunicationMode,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let s = 1.0 / (d_model as f64).sqrt();
        let mut proj = || Tensor::uniform(&[d_model, d_model], -s, s, rng).into_param();
        let (w_q, w_k) = match mode {
            CommunicationMode::Learned => (Some(proj()), Some(proj())),
            _ => (None, None),
        };
        Ok(AttentionParams {
            w_q,
            w_k,
            w_v: proj(),
            w_o: proj(),
            n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_v.dim(0)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Param<T>>) {
        if let Some(w) = &self.w_q {
            out.push(Param::new(format!("{prefix}.w_q"), w, true));
        }
        if let Some(w) = &self.w_k {
            out.push(Param::new(format!("{prefix}.w_k"), w, true));
        }
        out.push(Param::new(format!("{prefix}.w_v"), &self.w_v, true));
        out.push(Param::new(format!("{prefix}.w_o"), &self.w_o, true));
    }
}

/// Row-stochastic `N x N` routing matrix: row `i` is the querying neuron,
/// column `j` the source.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    n: usize,
    weights: Vec<f64>,
}

impl AttentionMap {
    pub fn new(n: usize, weights: Vec<f64>) -> Result<Self> {
        if n == 0 || weights.len() != n * n {
            return Err(Error::Contract(format!(
                "attention map of size {n} needs {} weights, got {}",
                n * n,
                weights.len()
            )));
        }
        Ok(AttentionMap { n, weights })
    }

    pub fn identity(n: usize) -> Self {
        let mut w = vec![0.0; n * n];
        (0..n).for_each(|i| w[i * n + i] = 1.0);
        AttentionMap { n, weights: w }
    }

    pub fn uniform(n: usize) -> Self {
        AttentionMap {
            n,
            weights: vec![1.0 / n as f64; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..][..self.n]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).iter().sum()).collect()
    }

    /// Column sums: total weight each neuron receives.
    pub fn in_degree(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.weights.iter().all(|&w| w >= 0.0 && w.is_finite())
            && self.row_sums().iter().all(|s| (s - 1.0).abs() <= tol)
    }

    /// Entrywise mean of equally sized maps.
    pub fn average(maps: &[AttentionMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Contract("average of zero attention maps".into()))?;
        let mut acc = vec![0.0; first.weights.len()];
        for m in maps {
            if m.n != first.n {
                return Err(Error::Contract(format!(
                    "cannot average {}x{} and {}x{} maps",
                    first.n, first.n, m.n, m.n
                )));
            }
            acc.iter_mut().zip(&m.weights).for_each(|(a, w)| *a += w);
        }
        let k = maps.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        AttentionMap::new(first.n, acc)
    }

    /// Relabels neurons: neuron `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                w[perm[i] * n + perm[j]] = self.get(i, j);
            }
        }
        AttentionMap { n, weights: w }
    }
}

/// Formats with at most nine significant digits, shortest form.
pub(crate) fn fmt_sig9(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    format!("{rounded}")
}

/// Writes the map as CSV with a header row and column of neuron indices.
pub fn export_attention_map(map: &AttentionMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("neuron");
    for j in 0..map.n {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for i in 0..map.n {
        out.push_str(&i.to_string());
        for &w in map.row(i) {
            out.push(',');
            out.push_str(&fmt_sig9(w));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_attention_map(path: impl AsRef<Path>) -> Result<AttentionMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Input(format!("{}: empty file", path.display())))?;
    let n = header.split(',').count() - 1;
    let mut weights = Vec::with_capacity(n * n);
    for (i, line) in lines.enumerate() {
        let mut cells = line.split(',');
        cells.next();
        for c in cells {
            let v = c.trim().parse::<f64>().map_err(|e| {
                Error::Input(format!("{}: row {i}: bad value {c:?}: {e}", path.display()))
            })?;
            weights.push(v);
        }
    }
    AttentionMap::new(n, weights)
}

fn dims4<T: Element>(h: &Tensor<T>) -> Result<[usize; 4]> {
    match *h.shape() {
        [b, n, l, d] => Ok([b, n, l, d]),
        _ => Err(Error::Contract(format!(
            "neuron states must be [batch, neurons, len, d_model], got {:?}",
            h.shape()
        ))),
    }
}

/// Attention across the neuron axis of `h: [b, N, l, d]`, independently at
/// every (batch, timestep). Returns the update for every neuron and the
/// routing weights averaged over batch, time and heads.
pub fn neuron_attention<T: Element>(
    h: &Tensor<T>,
    p: &AttentionParams<T>,
    mode: CommunicationMode,
) -> Result<(Tensor<T>, AttentionMap)> {
    let [b, n, l, d] = dims4(h)?;
    if d != p.d_model() {
        return Err(Error::shape("neuron_attention", h.shape(), p.w_v.shape()));
    }
    match mode {
        CommunicationMode::None => Ok((Tensor::zeros(h.shape()), AttentionMap::identity(n))),
        CommunicationMode::Static => {
            let v = h.matmul(&p.w_v)?;
            let mixed = v.mean_axis(1, true)?.broadcast_to(h.shape())?;
            Ok((mixed.matmul(&p.w_o)?, AttentionMap::uniform(n)))
        }
        CommunicationMode::Learned => {
            let (w_q, w_k) = match (&p.w_q, &p.w_k) {
                (Some(q), Some(k)) => (q, k),
                _ => {
                    return Err(Error::Config(
                        "learned communication needs query and key projections".into(),
                    ))
                }
            };
            let heads = p.n_heads;
            if heads == 0 || d % heads != 0 {
                return Err(Error::Config(format!(
                    "d_model {d} is not divisible by n_heads {heads}"
                )));
            }
            let dh = d / heads;
            let split = [b, n, l, heads, dh];
            // [b, N, l, H, dh] -> [b, l, H, N, dh]
            let q = h.matmul(w_q)?.reshape(&split)?.permute(&[0, 2, 3, 1, 4])?;
            let kt = h.matmul(w_k)?.reshape(&split)?.permute(&[0, 2, 3, 4, 1])?;
            let v = h.matmul(&p.w_v)?.reshape(&split)?.permute(&[0, 2, 3, 1, 4])?;
            let scores = with_kind(MacKind::Scores, || q.matmul(&kt))?.scale(1.0 / (dh as f64).sqrt());
            let weights = scores.softmax(4)?;
            let mixed = with_kind(MacKind::Mix, || weights.matmul(&v))?;
            let out = mixed
                .permute(&[0, 3, 1, 2, 4])?
                .reshape(&[b, n, l, d])?
                .matmul(&p.w_o)?;

            let mut avg = vec![0.0; n * n];
            for block in weights.data().chunks_exact(n * n) {
                avg.iter_mut().zip(block).for_each(|(a, w)| *a += w.f64());
            }
            let k = (b * l * heads) as f64;
            avg.iter_mut().for_each(|a| *a /= k);
            Ok((out, AttentionMap::new(n, avg)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identical_neurons_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = AttentionParams::<f64>::init(8, 4, CommunicationMode::Learned, &mut rng).unwrap();
        let x = Tensor::<f64>::uniform(&[1, 1, 3, 8], -1.0, 1.0, &mut rng);
        let h = x.broadcast_to(&[1, 2, 3, 8]).unwrap().detach();
        let (_, map) = neuron_attention(&h, &p, CommunicationMode::Learned).unwrap();
        for w in map.weights() {
            assert!((w - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn static_map_is_uniform_and_none_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Tensor::<f32>::uniform(&[2, 3, 4, 8], -1.0, 1.0, &mut rng);
        let p = AttentionParams::<f32>::init(8, 4, CommunicationMode::Static, &mut rng).unwrap();
        let (out, map) = neuron_attention(&h, &p, CommunicationMode::Static).unwrap();
        assert_eq!(out.shape(), h.shape());
        assert!(map.weights().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        let (out, map) = neuron_attention(&h, &p, CommunicationMode::None).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(map, AttentionMap::identity(3));
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let err = AttentionParams::<f32>::init(10, 4, CommunicationMode::Learned, &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn csv_export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        export_attention_map(&AttentionMap::uniform(2), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "neuron,0,1\n0,0.5,0.5\n1,0.5,0.5\n");
        export_attention_map(&AttentionMap::identity(2), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "neuron,0,1\n0,1,0\n1,0,1\n");
    }

    #[test]
    fn csv_roundtrip_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5;
        let mut w: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        for i in 0..n {
            let s: f64 = w[i * n..][..n].iter().sum();
            w[i * n..][..n].iter_mut().for_each(|v| *v /= s);
        }
        let map = AttentionMap::new(n, w).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        export_attention_map(&map, &path).unwrap();
        let back = read_attention_map(&path).unwrap();
        for (a, b) in map.weights().iter().zip(back.weights()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn export_surfaces_path_on_failure() {
        let err = export_attention_map(&AttentionMap::uniform(2), "/nonexistent/dir/m.csv")
            .unwrap_err()
            .to_string();
        assert!(err.contains("/nonexistent/dir/m.csv"), "{err}");
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("static".parse::<CommunicationMode>().unwrap(), CommunicationMode::Static);
        assert!("dense".parse::<CommunicationMode>().is_err());
        assert_eq!(serde_json::to_string(&CommunicationMode::None).unwrap(), "\"none\"");
    }
}
