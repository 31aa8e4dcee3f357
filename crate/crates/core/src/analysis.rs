//! Layer-contribution matrices from layer-weighted checkpoints, and top-k
//! latent-category profiles for masked words with their pairwise overlaps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::Model;
use crate::numerics::Graph;
use crate::tokenizers::{Tokenizer, MASK_ID};

/// Effective combination weights: row `i` (layer `i+1`) has `i+1` entries
/// over outputs `0..=i`, column 0 being the embedding output.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMatrix {
    pub rows: Vec<Vec<f64>>,
    pub epoch: Option<usize>,
}

pub fn extract_layer_weights(model: &Model, epoch: Option<usize>) -> Result<ContributionMatrix> {
    Ok(ContributionMatrix { rows: model.layer_weights()?, epoch })
}

/// Epoch number from a checkpoint file name such as `epoch-0020.ckpt`.
pub fn epoch_from_path(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    stem.strip_prefix("epoch-")?.parse().ok()
}

impl ContributionMatrix {
    pub fn num_layers(&self) -> usize {
        self.rows.len()
    }

    /// Header `layer,out_0,..,out_L`, then one line per layer with cells
    /// beyond the row left empty.
    pub fn to_csv(&self) -> String {
        let l = self.num_layers();
        let mut s = String::from("layer");
        for j in 0..=l {
            let _ = write!(s, ",out_{j}");
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(s, "{}", i + 1);
            for j in 0..=l {
                s.push(',');
                if let Some(w) = row.get(j) {
                    let _ = write!(s, "{w}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, m: String| Error::Format { kind: "heatmap csv", message: format!("line {line}: {m}") };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"layer") {
            return Err(bad(1, format!("unexpected header `{header}`")));
        }
        let l = cols.len().checked_sub(2).ok_or_else(|| bad(1, "no output columns".into()))?;
        for (j, c) in cols[1..].iter().enumerate() {
            if *c != format!("out_{j}") {
                return Err(bad(1, format!("unexpected column `{c}`")));
            }
        }
        let mut rows = Vec::with_capacity(l);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != l + 2 {
                return Err(bad(line_no, format!("expected {} cells, got {}", l + 2, cells.len())));
            }
            if cells[0] != (i + 1).to_string() {
                return Err(bad(line_no, format!("expected layer {}, got `{}`", i + 1, cells[0])));
            }
            let mut row = Vec::new();
            for (j, c) in cells[1..].iter().enumerate() {
                match (j <= i, c.is_empty()) {
                    (true, false) => row.push(c.parse().map_err(|_| bad(line_no, format!("bad weight `{c}`")))?),
                    (false, true) => {}
                    _ => return Err(bad(line_no, format!("cell out_{j} does not match the row length"))),
                }
            }
            rows.push(row);
        }
        if rows.len() != l {
            return Err(bad(rows.len() + 2, format!("expected {l} layer rows, got {}", rows.len())));
        }
        Ok(ContributionMatrix { rows, epoch: None })
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Grayscale grid, darker for larger weights; cells carry their value when
    /// there are at most 16 layers.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 44;
        const MARGIN: usize = 64;
        let l = self.num_layers();
        let width = MARGIN + CELL * (l + 1) + 8;
        let height = MARGIN + CELL * l.max(1) + 8;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
        );
        if let Some(e) = self.epoch {
            let _ = writeln!(s, r#"  <title>layer contributions, epoch {e}</title>"#);
        }
        for j in 0..=l {
            let x = MARGIN + j * CELL + CELL / 2;
            let _ = writeln!(s, r#"  <text x="{x}" y="{}" text-anchor="middle">out {j}</text>"#, MARGIN - 8);
        }
        for (i, row) in self.rows.iter().enumerate() {
            let y = MARGIN + i * CELL;
            let _ = writeln!(
                s,
                r#"  <text x="{}" y="{}" text-anchor="end">layer {}</text>"#,
                MARGIN - 6,
                y + CELL / 2 + 4,
                i + 1
            );
            for (j, &w) in row.iter().enumerate() {
                let x = MARGIN + j * CELL;
                let shade = (255.0 * (1.0 - w.clamp(0.0, 1.0))).round() as u8;
                let _ = writeln!(
                    s,
                    r##"  <rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},{shade})" stroke="#888"/>"##
                );
                if l <= 16 {
                    let ink = if shade < 128 { "#fff" } else { "#000" };
                    let _ = writeln!(
                        s,
                        r#"  <text x="{}" y="{}" text-anchor="middle" fill="{ink}">{w:.2}</text>"#,
                        x + CELL / 2,
                        y + CELL / 2 + 4
                    );
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn export_svg(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_svg().as_bytes())
    }
}

/// The `T` most probable latent categories for one masked word.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProfile {
    pub word: String,
    pub sentence: String,
    /// `(category, probability)`, probability descending.
    pub top: Vec<(usize, f64)>,
    pub k: usize,
}

/// Masks every subword of the first whitespace token equal to `word` with
/// `[MASK]`, averages the student's latent distributions over those
/// positions and returns the `top` most probable categories.
pub fn predict_semantic_topk(
    student: &Model,
    tokenizer: &Tokenizer,
    sentence: &str,
    word: &str,
    top: usize,
) -> Result<SemanticProfile> {
    let k = student.config.latent_k;
    if k == 0 {
        return Err(Error::invalid("checkpoint has no latent head"));
    }
    if top == 0 {
        return Err(Error::invalid("top must be at least 1"));
    }
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let target = words
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::invalid(format!("word `{word}` does not occur in `{sentence}`")))?;
    let (mut ids, owners) = tokenizer.encode_words(&words);
    let positions: Vec<usize> = owners.iter().enumerate().filter(|(_, &o)| o == target).map(|(i, _)| i).collect();
    if positions.is_empty() {
        return Err(Error::invalid(format!("word `{word}` produced no tokens")));
    }
    let max = student.config.max_seq_len;
    if *positions.last().expect("non-empty") >= max {
        return Err(Error::invalid(format!("word `{word}` lies beyond the first {max} tokens")));
    }
    ids.truncate(max);
    for &p in &positions {
        ids[p] = MASK_ID;
    }
    let mut g = Graph::new();
    let out = student.encoder_forward(&mut g, &ids, None)?;
    let probs = student.latent_head(&mut g, out.last(), &positions, k)?;
    let t = g.value(probs);
    let mut mean = vec![0.0f64; k];
    for r in 0..t.rows() {
        for (m, &p) in mean.iter_mut().zip(t.row(r)) {
            *m += p as f64;
        }
    }
    let total: f64 = mean.iter().sum();
    let mut ranked: Vec<(usize, f64)> = mean.into_iter().map(|m| m / total).enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top);
    Ok(SemanticProfile { word: word.to_string(), sentence: sentence.to_string(), top: ranked, k })
}

/// Size of the intersection of the two top-category index sets.
pub fn overlap_count(a: &SemanticProfile, b: &SemanticProfile) -> Result<usize> {
    if a.k != b.k {
        return Err(Error::invalid(format!("profiles come from different dictionaries (k = {} vs {})", a.k, b.k)));
    }
    let sa: BTreeSet<usize> = a.top.iter().map(|&(c, _)| c).collect();
    Ok(b.top.iter().filter(|(c, _)| sa.contains(c)).count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    pub words: Vec<String>,
    pub groups: Vec<String>,
    pub matrix: Vec<Vec<usize>>,
    /// Mean overlap over distinct pairs sharing a group (`None` without such pairs).
    pub within_group_mean: Option<f64>,
    pub cross_group_mean: Option<f64>,
}

pub fn overlap_report(profiles: &[SemanticProfile], groups: &[String]) -> Result<OverlapReport> {
    if profiles.len() < 2 {
        return Err(Error::invalid("an overlap report needs at least two targets"));
    }
    if groups.len() != profiles.len() {
        return Err(Error::shape(format!("{} groups for {} profiles", groups.len(), profiles.len())));
    }
    let n = profiles.len();
    let mut matrix = vec![vec![0usize; n]; n];
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i..n {
            let c = overlap_count(&profiles[i], &profiles[j])?;
            matrix[i][j] = c;
            matrix[j][i] = c;
            if i != j {
                if groups[i] == groups[j] { &mut within } else { &mut cross }.push(c as f64);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(OverlapReport {
        words: profiles.iter().map(|p| p.word.clone()).collect(),
        groups: groups.to_vec(),
        within_group_mean: mean(&within),
        cross_group_mean: mean(&cross),
        matrix,
    })
}

impl OverlapReport {
    /// JSON document with the profiles, the overlap matrix and group means.
    pub fn to_json(&self, profiles: &[SemanticProfile]) -> String {
        let targets: Vec<_> = profiles
            .iter()
            .zip(&self.groups)
            .map(|(p, g)| {
                json!({
                    "word": p.word,
                    "sentence": p.sentence,
                    "group": g,
                    "top": p.top.iter().map(|&(c, pr)| json!({"category": c, "probability": pr})).collect::<Vec<_>>(),
                })
            })
            .collect();
        let doc = json!({
            "targets": targets,
            "overlap": self.matrix,
            "within_group_mean": self.within_group_mean,
            "cross_group_mean": self.cross_group_mean,
        });
        let mut s = serde_json::to_string_pretty(&doc).expect("JSON values serialise");
        s.push('\n');
        s
    }
}
