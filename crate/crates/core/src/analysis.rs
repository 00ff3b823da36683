//! Neuron activation profiles, routing-graph statistics and report export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Batcher;
use crate::error::{Error, Result};
use crate::graph::{export_attention_map, fmt_sig9, AttentionMap};
use crate::model::{ForwardOptions, InnModel};
use crate::tensor::{no_grad, Element, Tensor};

/// Activations below this count as silent.
pub const SPARSITY_THRESHOLD: f64 = 0.1;

/// Tolerance on row sums when validating routing maps.
const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Per-neuron fraction of tokens below the threshold.
    pub neuron_sparsity: Vec<f64>,
    /// Fraction of all (neuron, token) pairs below the threshold.
    pub sparsity: f64,
    pub threshold: f64,
    pub tokens: usize,
}

/// Statistics over `activations[neuron][token]`; every neuron must have the
/// same number of tokens.
pub fn stats_from_activations(activations: &[Vec<f64>], threshold: f64) -> Result<ActivationStats> {
    let tokens = activations.first().map_or(0, Vec::len);
    if tokens == 0 || activations.iter().any(|a| a.len() != tokens) {
        return Err(Error::Input("activation matrix must be non-empty and rectangular".into()));
    }
    let t = tokens as f64;
    let mut stats = ActivationStats {
        mean: Vec::new(),
        variance: Vec::new(),
        neuron_sparsity: Vec::new(),
        sparsity: 0.0,
        threshold,
        tokens,
    };
    let mut silent_total = 0usize;
    for a in activations {
        let mean = a.iter().sum::<f64>() / t;
        let var = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t;
        let silent = a.iter().filter(|&&x| x < threshold).count();
        silent_total += silent;
        stats.mean.push(mean);
        stats.variance.push(var);
        stats.neuron_sparsity.push(silent as f64 / t);
    }
    stats.sparsity = silent_total as f64 / (t * activations.len() as f64);
    Ok(stats)
}

/// Mean absolute value over the feature axis of `states: [b, N, l, d]`,
/// appended per neuron in (batch, position) order.
pub fn neuron_activations<T: Element>(states: &Tensor<T>, out: &mut [Vec<f64>]) -> Result<()> {
    let [b, n, l, d] = match *states.shape() {
        [b, n, l, d] => [b, n, l, d],
        _ => return Err(Error::Contract(format!("states must be [b, N, l, d], got {:?}", states.shape()))),
    };
    if out.len() != n {
        return Err(Error::Contract(format!("{} activation rows for {n} neurons", out.len())));
    }
    let h = states.data();
    for bi in 0..b {
        for (i, row) in out.iter_mut().enumerate() {
            for t in 0..l {
                let v = &h[((bi * n + i) * l + t) * d..][..d];
                row.push(v.iter().map(|x| x.f64().abs()).sum::<f64>() / d as f64);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityStats {
    /// Column sums of the layer-averaged routing map.
    pub in_degree: Vec<f64>,
    pub hubs: Vec<usize>,
    pub specialists: Vec<usize>,
    /// Edges per neuron in each layer, counting weights strictly above the
    /// edge threshold.
    pub avg_degree_per_layer: Vec<f64>,
    pub in_degree_per_layer: Vec<Vec<f64>>,
    pub edge_threshold: f64,
}

pub const HUB_FACTOR: f64 = 1.5;
pub const SPECIALIST_FACTOR: f64 = 0.6;

/// Hubs receive more than 1.5x the mean in-degree, specialists less than
/// 0.6x. `edge_threshold` defaults to `1/N`.
pub fn connectivity_stats(maps: &[AttentionMap], edge_threshold: Option<f64>) -> Result<ConnectivityStats> {
    for (layer, m) in maps.iter().enumerate() {
        if !m.is_row_stochastic(STOCHASTIC_TOL) {
            return Err(Error::Contract(format!(
                "layer {layer} routing map is not row-stochastic (row sums {:?})",
                m.row_sums()
            )));
        }
    }
    let avg = AttentionMap::average(maps)?;
    let n = avg.n();
    let thr = edge_threshold.unwrap_or(1.0 / n as f64);
    let in_degree = avg.in_degree();
    let mean = in_degree.iter().sum::<f64>() / n as f64;
    let hubs = (0..n).filter(|&j| in_degree[j] > HUB_FACTOR * mean).collect();
    let specialists = (0..n).filter(|&j| in_degree[j] < SPECIALIST_FACTOR * mean).collect();
    let avg_degree_per_layer = maps
        .iter()
        .map(|m| m.weights().iter().filter(|&&w| w > thr).count() as f64 / n as f64)
        .collect();
    Ok(ConnectivityStats {
        in_degree,
        hubs,
        specialists,
        avg_degree_per_layer,
        in_degree_per_layer: maps.iter().map(AttentionMap::in_degree).collect(),
        edge_threshold: thr,
    })
}

/// Everything `export_report` writes.
#[derive(Clone, Debug)]
pub struct Report {
    pub activation: ActivationStats,
    pub connectivity: ConnectivityStats,
    /// Per-layer routing maps averaged over the analysed windows.
    pub maps: Vec<AttentionMap>,
}

/// Runs the model over non-overlapping windows of `ids` and collects
/// final-layer activation statistics and per-layer routing maps.
pub fn analyze<T: Element>(
    model: &InnModel<T>,
    ids: &[usize],
    batch: usize,
    len: usize,
    max_batches: Option<usize>,
) -> Result<Report> {
    let n = model.config.n_neurons;
    let batcher = Batcher::new(ids.to_vec(), 1, len, None)?;
    let mut acts = vec![Vec::new(); n];
    let mut layer_maps: Vec<Vec<AttentionMap>> = vec![Vec::new(); model.config.n_layers];
    let _g = no_grad();
    for b in batcher
        .sequential()
        .chunks(batch)
        .take(max_batches.unwrap_or(usize::MAX))
    {
        let inputs: Vec<usize> = b.iter().flat_map(|w| w.inputs.iter().copied()).collect();
        let opts = ForwardOptions {
            capture_states: true,
            ..ForwardOptions::eval()
        };
        let out = model.forward(&inputs, b.len(), len, opts)?;
        let last = out.states.last().ok_or_else(|| Error::Config("model has no layers".into()))?;
        neuron_activations(last, &mut acts)?;
        for (acc, m) in layer_maps.iter_mut().zip(out.maps) {
            acc.push(m);
        }
    }
    let maps = layer_maps
        .iter()
        .map(|m| AttentionMap::average(m))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        activation: stats_from_activations(&acts, SPARSITY_THRESHOLD)?,
        connectivity: connectivity_stats(&maps, None)?,
        maps,
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    hubs: &'a [usize],
    specialists: &'a [usize],
    avg_degree_per_layer: &'a [f64],
    sparsity: f64,
    in_degree: &'a [f64],
    edge_threshold: f64,
    tokens: usize,
}

/// One row of `neuron_stats.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronRow {
    pub neuron: usize,
    pub in_degree: f64,
    pub mean_activation: f64,
    pub activation_variance: f64,
    pub sparsity: f64,
}

const NEURON_HEADER: &str = "neuron,in_degree,mean_activation,activation_variance,sparsity";

/// Writes `attention_layer{i}.csv`, `neuron_stats.csv` and `summary.json`.
pub fn export_report(report: &Report, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in report.maps.iter().enumerate() {
        export_attention_map(m, dir.join(format!("attention_layer{i}.csv")))?;
    }
    let (a, c) = (&report.activation, &report.connectivity);
    let mut csv = format!("{NEURON_HEADER}\n");
    for j in 0..c.in_degree.len() {
        csv.push_str(&format!(
            "{j},{},{},{},{}\n",
            fmt_sig9(c.in_degree[j]),
            fmt_sig9(a.mean[j]),
            fmt_sig9(a.variance[j]),
            fmt_sig9(a.neuron_sparsity[j])
        ));
    }
    let path = dir.join("neuron_stats.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let summary = Summary {
        hubs: &c.hubs,
        specialists: &c.specialists,
        avg_degree_per_layer: &c.avg_degree_per_layer,
        sparsity: a.sparsity,
        in_degree: &c.in_degree,
        edge_threshold: c.edge_threshold,
        tokens: a.tokens,
    };
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))
}

pub fn read_neuron_stats(path: impl AsRef<Path>) -> Result<Vec<NeuronRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(NEURON_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("{}: malformed row {i}: {line:?}", path.display()));
            if cells.len() != 5 {
                return Err(bad());
            }
            let f = |k: usize| cells[k].parse::<f64>().map_err(|_| bad());
            Ok(NeuronRow {
                neuron: cells[0].parse().map_err(|_| bad())?,
                in_degree: f(1)?,
                mean_activation: f(2)?,
                activation_variance: f(3)?,
                sparsity: f(4)?,
            })
        })
        .collect()
}
