//! Temporal-graph data model, ingestion from timestamped edge lists and
//! attribute files, snapshot discretization, validation, and directory
//! serialization for both observed and generated sequences.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// One timestep: directed binary adjacency (entry (i, j) = 1 means i -> j)
/// plus an N x F attribute matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub adjacency: Array2<f64>,
    pub attributes: Array2<f64>,
}

impl Snapshot {
    pub fn empty(num_nodes: usize, attr_dim: usize) -> Self {
        Snapshot {
            adjacency: Array2::zeros((num_nodes, num_nodes)),
            attributes: Array2::zeros((num_nodes, attr_dim)),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Per-dimension z-score transform applied to in-memory attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrTransform {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AttrTransform {
    /// Fit over every (node, timestep) value; zero-variance dims get std 1.
    pub fn fit(snapshots: &[Snapshot], attr_dim: usize) -> Self {
        let count = (snapshots.len() * snapshots[0].attributes.nrows()) as f64;
        let mut mean = vec![0.0; attr_dim];
        let mut std = vec![0.0; attr_dim];
        for s in snapshots {
            for row in s.attributes.rows() {
                for (d, v) in row.iter().enumerate() {
                    mean[d] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for s in snapshots {
            for row in s.attributes.rows() {
                for (d, v) in row.iter().enumerate() {
                    std[d] += (v - mean[d]).powi(2);
                }
            }
        }
        for sd in &mut std {
            *sd = (*sd / count).sqrt();
            if *sd == 0.0 {
                *sd = 1.0;
            }
        }
        AttrTransform { mean, std }
    }

    pub fn apply(&self, attrs: &mut Array2<f64>) {
        for mut row in attrs.rows_mut() {
            for (d, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[d]) / self.std[d];
            }
        }
    }

    pub fn invert(&self, attrs: &mut Array2<f64>) {
        for mut row in attrs.rows_mut() {
            for (d, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[d] + self.mean[d];
            }
        }
    }
}

/// Ordered sequence of snapshots over a fixed node set.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    pub num_nodes: usize,
    pub attr_dim: usize,
    pub snapshots: Vec<Snapshot>,
    /// External label -> dense index, when ingested from labeled data.
    pub node_labels: Option<BTreeMap<String, usize>>,
    /// Present iff in-memory attributes are standardized.
    pub attr_transform: Option<AttrTransform>,
    /// Whether this graph standardizes attributes when they are (re)populated.
    pub standardize: bool,
}

impl TemporalGraph {
    pub fn new(num_nodes: usize, attr_dim: usize, snapshots: Vec<Snapshot>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Shape("graph needs at least one node".into()));
        }
        if snapshots.is_empty() {
            return Err(Error::Shape("graph needs at least one snapshot".into()));
        }
        for (t, s) in snapshots.iter().enumerate() {
            if s.adjacency.dim() != (num_nodes, num_nodes) {
                return Err(Error::Shape(format!(
                    "snapshot {}: adjacency is {:?}, expected ({num_nodes}, {num_nodes})",
                    t + 1,
                    s.adjacency.dim()
                )));
            }
            if s.attributes.dim() != (num_nodes, attr_dim) {
                return Err(Error::Shape(format!(
                    "snapshot {}: attributes are {:?}, expected ({num_nodes}, {attr_dim})",
                    t + 1,
                    s.attributes.dim()
                )));
            }
        }
        Ok(TemporalGraph {
            num_nodes,
            attr_dim,
            snapshots,
            node_labels: None,
            attr_transform: None,
            standardize: false,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.snapshots.len()
    }

    /// Standardize attributes in place (no-op for F = 0 or when already done).
    pub fn standardize_attrs(&mut self) {
        if self.attr_dim == 0 || self.attr_transform.is_some() {
            return;
        }
        let transform = AttrTransform::fit(&self.snapshots, self.attr_dim);
        for s in &mut self.snapshots {
            transform.apply(&mut s.attributes);
        }
        self.attr_transform = Some(transform);
    }

    /// Attribute matrix at step `t` (0-based) in original units.
    pub fn raw_attributes(&self, t: usize) -> Array2<f64> {
        let mut attrs = self.snapshots[t].attributes.clone();
        if let Some(tr) = &self.attr_transform {
            tr.invert(&mut attrs);
        }
        attrs
    }

    /// Structural and attribute equality; adjacency exact, attributes within
    /// `tol` (compared in whatever space each graph currently holds).
    pub fn approx_eq(&self, other: &TemporalGraph, tol: f64) -> bool {
        if self.num_nodes != other.num_nodes
            || self.attr_dim != other.attr_dim
            || self.num_steps() != other.num_steps()
        {
            return false;
        }
        for (a, b) in self.snapshots.iter().zip(&other.snapshots) {
            if a.adjacency != b.adjacency {
                return false;
            }
            for (x, y) in a.attributes.iter().zip(b.attributes.iter()) {
                if (x - y).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// How per-bin attributes are derived during ingestion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttributePolicy {
    /// Attributes come from `ingest_attributes`; gaps carry the last
    /// observed value forward (zeros before the first observation).
    #[default]
    CarryForward,
    /// Derive two attributes per bin from the raw events:
    /// [outgoing event count, incoming event count].
    EventCounts,
}

/// Ingestion settings for a timestamped edge list.
#[derive(Clone, Debug)]
pub struct IngestSpec {
    /// Number of equal-width time bins T.
    pub num_bins: usize,
    pub attribute_policy: AttributePolicy,
    /// Attribute dimension to pre-allocate when no attribute file is given.
    pub attr_dim: usize,
    /// Standardize attributes (z-score per dimension) once populated.
    pub standardize: bool,
}

impl Default for IngestSpec {
    fn default() -> Self {
        IngestSpec {
            num_bins: 1,
            attribute_policy: AttributePolicy::CarryForward,
            attr_dim: 0,
            standardize: true,
        }
    }
}

/// Counters from one ingestion pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub total_events: usize,
    pub events_per_bin: Vec<usize>,
    pub self_loops_dropped: usize,
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|f| !f.is_empty())
        .collect()
}

/// Parse a timestamped edge list and discretize it into `spec.num_bins`
/// equal-width snapshots. Node identifiers are densely re-indexed in order
/// of first appearance.
pub fn ingest_edge_list(path: &Path, spec: &IngestSpec) -> Result<TemporalGraph> {
    ingest_edge_list_stats(path, spec).map(|(g, _)| g)
}

pub fn ingest_edge_list_stats(
    path: &Path,
    spec: &IngestSpec,
) -> Result<(TemporalGraph, IngestStats)> {
    if spec.num_bins == 0 {
        return Err(Error::Config("num_bins must be >= 1".into()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut next_index = 0usize;
    let mut events: Vec<(usize, usize, f64)> = Vec::new();
    let mut stats = IngestStats {
        events_per_bin: vec![0; spec.num_bins],
        ..Default::default()
    };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("expected `src dst ts`, got {} fields", fields.len()),
            });
        }
        let ts: f64 = fields[2].parse().map_err(|_| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            msg: format!("bad timestamp `{}`", fields[2]),
        })?;
        if !ts.is_finite() {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: "non-finite timestamp".into(),
            });
        }
        let mut index_of = |label: &str| -> usize {
            *labels.entry(label.to_string()).or_insert_with(|| {
                let i = next_index;
                next_index += 1;
                i
            })
        };
        let src = index_of(fields[0]);
        let dst = index_of(fields[1]);
        stats.total_events += 1;
        if src == dst {
            stats.self_loops_dropped += 1;
            continue;
        }
        events.push((src, dst, ts));
    }
    if stats.total_events == 0 {
        return Err(Error::EmptyInput(format!("{}: no edge events", path.display())));
    }
    let num_nodes = next_index;
    let t_min = events.iter().map(|e| e.2).fold(f64::INFINITY, f64::min);
    let t_max = events.iter().map(|e| e.2).fold(f64::NEG_INFINITY, f64::max);
    if t_min == t_max && spec.num_bins > 1 {
        return Err(Error::DegenerateRange(format!(
            "single distinct timestamp {t_min} cannot fill {} bins",
            spec.num_bins
        )));
    }
    let width = (t_max - t_min) / spec.num_bins as f64;
    let bin_of = |ts: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((ts - t_min) / width) as usize).min(spec.num_bins - 1)
        }
    };

    let attr_dim = match spec.attribute_policy {
        AttributePolicy::CarryForward => spec.attr_dim,
        AttributePolicy::EventCounts => 2,
    };
    let mut snapshots: Vec<Snapshot> = (0..spec.num_bins)
        .map(|_| Snapshot::empty(num_nodes, attr_dim))
        .collect();
    for &(src, dst, ts) in &events {
        let b = bin_of(ts);
        stats.events_per_bin[b] += 1;
        snapshots[b].adjacency[[src, dst]] = 1.0;
        if spec.attribute_policy == AttributePolicy::EventCounts {
            snapshots[b].attributes[[src, 0]] += 1.0;
            snapshots[b].attributes[[dst, 1]] += 1.0;
        }
    }
    let mut graph = TemporalGraph::new(num_nodes, attr_dim, snapshots)?;
    graph.node_labels = Some(labels);
    graph.standardize = spec.standardize;
    if spec.standardize && spec.attribute_policy == AttributePolicy::EventCounts {
        graph.standardize_attrs();
    }
    Ok((graph, stats))
}

/// Populate per-node attributes from a long-format file of
/// `label timestep v1 ... vF` rows (timestep is 1-based). Missing
/// (node, timestep) pairs carry the last observed value forward,
/// with zeros before the first observation.
pub fn ingest_attributes(g: &TemporalGraph, path: &Path) -> Result<TemporalGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let num_steps = g.num_steps();
    let mut attr_dim: Option<usize> = None;
    // observed[(node, t)] = attribute vector
    let mut observed: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() < 3 {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: "expected `label timestep v1 ...`".into(),
            });
        }
        let node = match &g.node_labels {
            Some(labels) => *labels
                .get(fields[0])
                .ok_or_else(|| Error::UnknownLabel(fields[0].to_string()))?,
            None => fields[0]
                .parse::<usize>()
                .ok()
                .filter(|&i| i < g.num_nodes)
                .ok_or_else(|| Error::UnknownLabel(fields[0].to_string()))?,
        };
        let t: usize = fields[1].parse().map_err(|_| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            msg: format!("bad timestep `{}`", fields[1]),
        })?;
        if t == 0 || t > num_steps {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("timestep {t} outside 1..={num_steps}"),
            });
        }
        let values: Vec<f64> = fields[2..]
            .iter()
            .map(|f| {
                f.parse().map_err(|_| Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    msg: format!("bad attribute value `{f}`"),
                })
            })
            .collect::<Result<_>>()?;
        match attr_dim {
            None => attr_dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Shape(format!(
                    "{}:{}: attribute dimension {} != {}",
                    path.display(),
                    lineno + 1,
                    values.len(),
                    d
                )));
            }
            _ => {}
        }
        observed.insert((node, t - 1), values);
    }
    let attr_dim = attr_dim.ok_or_else(|| {
        Error::EmptyInput(format!("{}: no attribute rows", path.display()))
    })?;

    let mut snapshots = g.snapshots.clone();
    for s in &mut snapshots {
        s.attributes = Array2::zeros((g.num_nodes, attr_dim));
    }
    for node in 0..g.num_nodes {
        let mut current = vec![0.0; attr_dim];
        for (t, s) in snapshots.iter_mut().enumerate() {
            if let Some(values) = observed.get(&(node, t)) {
                current.clone_from(values);
            }
            for (d, v) in current.iter().enumerate() {
                s.attributes[[node, d]] = *v;
            }
        }
    }
    let mut out = TemporalGraph::new(g.num_nodes, attr_dim, snapshots)?;
    out.node_labels = g.node_labels.clone();
    out.standardize = g.standardize;
    if out.standardize {
        out.standardize_attrs();
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Serialize a graph to a directory: one edge-list file and one attribute
/// matrix file per snapshot (attributes in original units), plus a manifest.
/// `read_graph` on the directory reproduces the graph.
pub fn write_graph(g: &TemporalGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("N = {}\n", g.num_nodes));
    manifest.push_str(&format!("T = {}\n", g.num_steps()));
    manifest.push_str(&format!("F = {}\n", g.attr_dim));
    manifest.push_str(&format!("standardized = {}\n", g.attr_transform.is_some()));
    if let Some(tr) = &g.attr_transform {
        let means: Vec<String> = tr.mean.iter().map(|v| v.to_string()).collect();
        let stds: Vec<String> = tr.std.iter().map(|v| v.to_string()).collect();
        manifest.push_str(&format!("mean = {}\n", means.join(" ")));
        manifest.push_str(&format!("std = {}\n", stds.join(" ")));
    }
    write_file(&dir.join("manifest.txt"), &manifest)?;

    if let Some(labels) = &g.node_labels {
        let mut by_index: Vec<(&usize, &String)> =
            labels.iter().map(|(l, i)| (i, l)).collect();
        by_index.sort();
        let body: String = by_index
            .iter()
            .map(|(i, l)| format!("{i} {l}\n"))
            .collect();
        write_file(&dir.join("labels.txt"), &body)?;
    }

    for (t, s) in g.snapshots.iter().enumerate() {
        let mut edges = String::new();
        for ((i, j), v) in s.adjacency.indexed_iter() {
            if *v != 0.0 {
                edges.push_str(&format!("{i} {j}\n"));
            }
        }
        write_file(&dir.join(format!("edges_t{}.txt", t + 1)), &edges)?;
        if g.attr_dim > 0 {
            let raw = g.raw_attributes(t);
            let mut body = String::new();
            for row in raw.rows() {
                let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                body.push_str(&fields.join(" "));
                body.push('\n');
            }
            write_file(&dir.join(format!("attrs_t{}.txt", t + 1)), &body)?;
        }
    }
    Ok(())
}

fn manifest_value<'a>(map: &'a BTreeMap<String, String>, key: &str, dir: &Path) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Parse {
            path: dir.join("manifest.txt"),
            line: 0,
            msg: format!("missing key `{key}`"),
        })
}

/// Load a graph directory produced by [`write_graph`].
pub fn read_graph(dir: &Path) -> Result<TemporalGraph> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let parse_usize = |key: &str| -> Result<usize> {
        manifest_value(&map, key, dir)?.parse().map_err(|_| Error::Parse {
            path: dir.join("manifest.txt"),
            line: 0,
            msg: format!("bad value for `{key}`"),
        })
    };
    let num_nodes = parse_usize("N")?;
    let num_steps = parse_usize("T")?;
    let attr_dim = parse_usize("F")?;
    let standardized = manifest_value(&map, "standardized", dir)? == "true";

    let mut snapshots = Vec::with_capacity(num_steps);
    for t in 1..=num_steps {
        let edge_path = dir.join(format!("edges_t{t}.txt"));
        let edge_text = fs::read_to_string(&edge_path).map_err(|e| Error::io(&edge_path, e))?;
        let mut adjacency = Array2::zeros((num_nodes, num_nodes));
        for (lineno, raw) in edge_text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let fields = split_fields(line);
            let bad = |msg: String| Error::Parse {
                path: edge_path.clone(),
                line: lineno + 1,
                msg,
            };
            if fields.len() != 2 {
                return Err(bad("expected `src dst`".into()));
            }
            let i: usize = fields[0].parse().map_err(|_| bad("bad src".into()))?;
            let j: usize = fields[1].parse().map_err(|_| bad("bad dst".into()))?;
            if i >= num_nodes || j >= num_nodes {
                return Err(bad(format!("node index out of range ({i}, {j})")));
            }
            adjacency[[i, j]] = 1.0;
        }
        let mut attributes = Array2::zeros((num_nodes, attr_dim));
        if attr_dim > 0 {
            let attr_path = dir.join(format!("attrs_t{t}.txt"));
            let attr_text =
                fs::read_to_string(&attr_path).map_err(|e| Error::io(&attr_path, e))?;
            let rows: Vec<&str> = attr_text.lines().filter(|l| !l.trim().is_empty()).collect();
            if rows.len() != num_nodes {
                return Err(Error::Shape(format!(
                    "{}: {} rows, expected {num_nodes}",
                    attr_path.display(),
                    rows.len()
                )));
            }
            for (i, row) in rows.iter().enumerate() {
                let fields = split_fields(row);
                if fields.len() != attr_dim {
                    return Err(Error::Shape(format!(
                        "{}: row {} has {} values, expected {attr_dim}",
                        attr_path.display(),
                        i + 1,
                        fields.len()
                    )));
                }
                for (d, f) in fields.iter().enumerate() {
                    attributes[[i, d]] = f.parse().map_err(|_| Error::Parse {
                        path: attr_path.clone(),
                        line: i + 1,
                        msg: format!("bad attribute value `{f}`"),
                    })?;
                }
            }
        }
        snapshots.push(Snapshot {
            adjacency,
            attributes,
        });
    }
    let mut graph = TemporalGraph::new(num_nodes, attr_dim, snapshots)?;

    let labels_path = dir.join("labels.txt");
    if labels_path.exists() {
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut labels = BTreeMap::new();
        for line in text.lines() {
            let fields = split_fields(line);
            if fields.len() == 2 {
                if let Ok(i) = fields[0].parse::<usize>() {
                    labels.insert(fields[1].to_string(), i);
                }
            }
        }
        graph.node_labels = Some(labels);
    }

    if standardized && attr_dim > 0 {
        let parse_vec = |key: &str| -> Result<Vec<f64>> {
            manifest_value(&map, key, dir)?
                .split_whitespace()
                .map(|f| {
                    f.parse().map_err(|_| Error::Parse {
                        path: dir.join("manifest.txt"),
                        line: 0,
                        msg: format!("bad value in `{key}`"),
                    })
                })
                .collect()
        };
        let transform = AttrTransform {
            mean: parse_vec("mean")?,
            std: parse_vec("std")?,
        };
        if transform.mean.len() != attr_dim || transform.std.len() != attr_dim {
            return Err(Error::Shape("manifest mean/std dimension mismatch".into()));
        }
        for s in &mut graph.snapshots {
            transform.apply(&mut s.attributes);
        }
        graph.attr_transform = Some(transform);
        graph.standardize = true;
    }
    Ok(graph)
}

/// Check every data-model invariant; returns one description per violation.
pub fn validate(g: &TemporalGraph) -> Vec<String> {
    let mut violations = Vec::new();
    if g.snapshots.is_empty() {
        violations.push("graph has no snapshots".to_string());
    }
    for (idx, s) in g.snapshots.iter().enumerate() {
        let t = idx + 1;
        if s.adjacency.dim() != (g.num_nodes, g.num_nodes) {
            violations.push(format!(
                "adjacency shape {:?} != ({}, {}), t={t}",
                s.adjacency.dim(),
                g.num_nodes,
                g.num_nodes
            ));
            continue;
        }
        if s.attributes.dim() != (g.num_nodes, g.attr_dim) {
            violations.push(format!(
                "attribute shape {:?} != ({}, {}), t={t}",
                s.attributes.dim(),
                g.num_nodes,
                g.attr_dim
            ));
        }
        for ((i, j), &v) in s.adjacency.indexed_iter() {
            if v != 0.0 && v != 1.0 {
                violations.push(format!("non-binary adjacency entry {v} at ({i}, {j}), t={t}"));
            } else if i == j && v != 0.0 {
                violations.push(format!("self-loop, t={t}, node {i}"));
            }
        }
        for ((i, d), &v) in s.attributes.indexed_iter() {
            if !v.is_finite() {
                violations.push(format!("non-finite attribute, t={t}, node {i}, dim {d}"));
            }
        }
    }
    violations
}
