//! Synthetic Gaussian-blob classification data, linear softmax helpers and
//! the dataset CSV format.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ArgusError, Result};

/// Samples of one split on one agent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// True where the label was flipped.
    pub corrupted: Vec<bool>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Class centers drawn from `N(0, separation^2 I)`.
pub fn blob_centers<R: Rng + ?Sized>(rng: &mut R, classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| (0..dim).map(|_| separation * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// `count` samples with uniform labels around `centers`, unit noise.
pub fn sample_blobs<R: Rng + ?Sized>(rng: &mut R, centers: &[Vec<f64>], count: usize) -> LabeledSet {
    let mut set = LabeledSet::default();
    for _ in 0..count {
        let label = rng.random_range(0..centers.len());
        let f = centers[label]
            .iter()
            .map(|c| c + rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<f64>>();
        set.features.push(f);
        set.labels.push(label);
        set.corrupted.push(false);
    }
    set
}

/// Replaces the label at each masked position by a uniformly drawn wrong class.
pub fn corrupt_labels<R: Rng + ?Sized>(rng: &mut R, set: &mut LabeledSet, mask: &[usize], classes: usize) {
    for &j in mask {
        let shift = rng.random_range(1..classes);
        set.labels[j] = (set.labels[j] + shift) % classes;
        set.corrupted[j] = true;
    }
}

/// Class-major weights: `w[c * dim + f]`.
pub fn logits(w: &[f64], features: &[f64], classes: usize) -> Vec<f64> {
    let dim = features.len();
    (0..classes)
        .map(|c| w[c * dim..(c + 1) * dim].iter().zip(features).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Cross-entropy of one sample and its gradient in the weights.
pub fn ce_and_grad(w: &[f64], features: &[f64], label: usize, classes: usize) -> (f64, Vec<f64>) {
    let z = logits(w, features, classes);
    let lp = log_softmax(&z);
    let dim = features.len();
    let mut g = vec![0.0; w.len()];
    for c in 0..classes {
        let coef = lp[c].exp() - if c == label { 1.0 } else { 0.0 };
        for (gk, f) in g[c * dim..(c + 1) * dim].iter_mut().zip(features) {
            *gk = coef * f;
        }
    }
    (-lp[label], g)
}

pub fn ce(w: &[f64], features: &[f64], label: usize, classes: usize) -> f64 {
    -log_softmax(&logits(w, features, classes))[label]
}

pub fn accuracy(w: &[f64], set: &LabeledSet, classes: usize) -> f64 {
    if set.is_empty() {
        return f64::NAN;
    }
    let hits = set
        .features
        .iter()
        .zip(&set.labels)
        .filter(|(f, &l)| {
            let z = logits(w, f, classes);
            let best = (0..classes).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap_or(0);
            best == l
        })
        .count();
    hits as f64 / set.len() as f64
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Area under the ROC curve of `scores` for `positives`, ties counted half.
pub fn auc(scores: &[f64], positives: &[bool]) -> f64 {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (s, &p) in scores.iter().zip(positives) {
        if p {
            pos.push(*s);
        } else {
            neg.push(*s);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U via average ranks.
    let mut ranks = vec![0.0; scores.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && scores[idx[e + 1]] == scores[idx[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    let rank_sum: f64 = positives.iter().zip(&ranks).filter(|(p, _)| **p).map(|(_, r)| r).sum();
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Per-agent named splits, as stored in the dataset CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetFile {
    /// `(agent, split name, samples)`.
    pub parts: Vec<(usize, String, LabeledSet)>,
}

impl DatasetFile {
    pub fn get(&self, agent: usize, split: &str) -> Option<&LabeledSet> {
        self.parts.iter().find(|(a, s, _)| *a == agent && s == split).map(|(_, _, set)| set)
    }

    pub fn agents(&self) -> usize {
        self.parts.iter().map(|(a, _, _)| a + 1).max().unwrap_or(0)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.parts.iter().find_map(|(_, _, s)| s.features.first().map(Vec::len))
    }

    /// Header `agent,split,label,corrupted,f0..f{d-1}`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let dim = self.feature_dim().unwrap_or(0);
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["agent".to_string(), "split".into(), "label".into(), "corrupted".into()];
        header.extend((0..dim).map(|k| format!("f{k}")));
        w.write_record(&header)?;
        for (agent, split, set) in &self.parts {
            for k in 0..set.len() {
                let mut row = vec![
                    agent.to_string(),
                    split.clone(),
                    set.labels[k].to_string(),
                    u8::from(set.corrupted[k]).to_string(),
                ];
                row.extend(set.features[k].iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(source);
        let header = r.headers()?.clone();
        let fixed = ["agent", "split", "label", "corrupted"];
        if header.len() < 4 || header.iter().take(4).ne(fixed.iter().copied()) {
            return Err(ArgusError::invalid(format!(
                "dataset header must start with agent,split,label,corrupted, got {:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        let dim = header.len() - 4;
        for (k, name) in header.iter().skip(4).enumerate() {
            if name != format!("f{k}") {
                return Err(ArgusError::invalid(format!("dataset column {} should be f{k}, got {name}", k + 4)));
            }
        }
        let mut file = DatasetFile::default();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| ArgusError::invalid(format!("dataset row {}: bad {what}", line + 2));
            let agent: usize = rec[0].parse().map_err(|_| bad("agent"))?;
            let split = rec[1].to_string();
            let label: usize = rec[2].parse().map_err(|_| bad("label"))?;
            let corrupted = match &rec[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("corrupted flag")),
            };
            let features = (0..dim)
                .map(|k| rec[4 + k].parse::<f64>().map_err(|_| bad("feature")))
                .collect::<Result<Vec<f64>>>()?;
            let pos = match file.parts.iter().position(|(a, s, _)| *a == agent && *s == split) {
                Some(p) => p,
                None => {
                    file.parts.push((agent, split, LabeledSet::default()));
                    file.parts.len() - 1
                }
            };
            let set = &mut file.parts[pos].2;
            set.features.push(features);
            set.labels.push(label);
            set.corrupted.push(corrupted);
        }
        Ok(file)
    }
}
