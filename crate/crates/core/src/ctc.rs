//! CTC loss, greedy decoding and character error rate.
//!
//! Logits rows have `A + 1` columns; column `A` (the last) is the blank.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::alphabet;
use crate::error::{invalid, shape, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    symbols: Vec<usize>,
    text: String,
}

impl LabelSequence {
    pub fn from_text(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(invalid("label text must be nonempty"));
        }
        let symbols = text
            .chars()
            .map(|c| alphabet::index_of(c).ok_or_else(|| invalid(format!("{c:?} not in alphabet"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            symbols,
            text: text.to_owned(),
        })
    }

    pub fn from_symbols(symbols: Vec<usize>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(invalid("label must contain at least one symbol"));
        }
        let text = symbols
            .iter()
            .map(|&s| alphabet::char_at(s).ok_or_else(|| invalid(format!("symbol {s} out of range"))))
            .collect::<Result<_>>()?;
        Ok(Self { symbols, text })
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Fewest frames any alignment needs: one per symbol plus a blank
    /// between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.symbols.windows(2).filter(|w| w[0] == w[1]).count();
        self.symbols.len() + repeats
    }
}

#[derive(Debug, Clone)]
pub struct CtcOutput {
    /// `-log p(label | logits)`; `+inf` when no alignment fits.
    pub loss: f64,
    pub dlogits: Array2<f64>,
    pub feasible: bool,
    /// `log p` recomputed from the backward variables at the first frame.
    pub backward_log_likelihood: f64,
}

pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - z);
    }
    out
}

pub fn ctc_loss(logits: ArrayView2<f64>, label: &LabelSequence) -> Result<CtcOutput> {
    let (frames, classes) = logits.dim();
    if classes < 2 {
        return Err(shape("logits need at least one symbol column plus blank"));
    }
    if frames == 0 {
        return Err(shape("logits have no frames"));
    }
    let blank = classes - 1;
    if let Some(&s) = label.symbols.iter().find(|&&s| s >= blank) {
        return Err(invalid(format!(
            "label symbol {s} does not fit {} non-blank classes",
            blank
        )));
    }
    if label.min_frames() > frames {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            dlogits: Array2::zeros((frames, classes)),
            feasible: false,
            backward_log_likelihood: f64::NEG_INFINITY,
        });
    }

    let logp = log_softmax(logits);
    let states = 2 * label.len() + 1;
    let ext: Vec<usize> = (0..states)
        .map(|s| if s % 2 == 0 { blank } else { label.symbols[s / 2] })
        .collect();
    // A state may be entered by skipping the preceding blank unless it is a
    // blank itself or repeats the symbol two states back.
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = Array2::from_elem((frames, states), neg);
    alpha[[0, 0]] = logp[[0, blank]];
    alpha[[0, 1]] = logp[[0, ext[1]]];
    for t in 1..frames {
        for s in 0..states {
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = log_sum_exp(a, alpha[[t - 1, s - 1]]);
            }
            if can_skip(s) {
                a = log_sum_exp(a, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = a + logp[[t, ext[s]]];
        }
    }
    let last = frames - 1;
    let log_z = log_sum_exp(alpha[[last, states - 1]], alpha[[last, states - 2]]);

    // beta[t][s]: log-probability of emitting frames t+1.. given state s at t.
    let mut beta = Array2::from_elem((frames, states), neg);
    beta[[last, states - 1]] = 0.0;
    beta[[last, states - 2]] = 0.0;
    for t in (0..last).rev() {
        for s in 0..states {
            let mut b = beta[[t + 1, s]] + logp[[t + 1, ext[s]]];
            if s + 1 < states {
                b = log_sum_exp(b, beta[[t + 1, s + 1]] + logp[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < states && can_skip(s + 2) {
                b = log_sum_exp(b, beta[[t + 1, s + 2]] + logp[[t + 1, ext[s + 2]]]);
            }
            beta[[t, s]] = b;
        }
    }
    let backward_log_likelihood =
        log_sum_exp(alpha[[0, 0]] + beta[[0, 0]], alpha[[0, 1]] + beta[[0, 1]]);

    let mut dlogits = logp.mapv(f64::exp);
    for t in 0..frames {
        for s in 0..states {
            let occ = alpha[[t, s]] + beta[[t, s]] - log_z;
            if occ > neg {
                dlogits[[t, ext[s]]] -= occ.exp();
            }
        }
    }

    Ok(CtcOutput {
        loss: -log_z,
        dlogits,
        feasible: true,
        backward_log_likelihood,
    })
}

/// Best-path symbols: per-frame argmax (lowest index wins ties), repeats
/// collapsed, blanks removed.
pub fn greedy_decode_symbols(logits: ArrayView2<f64>) -> Vec<usize> {
    let blank = logits.ncols().saturating_sub(1);
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.rows() {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if prev != Some(best) && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn greedy_decode(logits: ArrayView2<f64>) -> String {
    greedy_decode_symbols(logits)
        .into_iter()
        .filter_map(alphabet::char_at)
        .collect()
}

/// Unit-cost Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1).min(row[j] + 1).min(diag + usize::from(ca != cb));
            diag = up;
        }
    }
    row[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CerScore {
    pub value: f64,
    pub edit_ops: usize,
    pub ref_len: usize,
}

/// Character error rate; not clamped, so values above 1 are possible.
pub fn cer(hypothesis: &str, reference: &str) -> Result<CerScore> {
    let ref_len = reference.chars().count();
    if ref_len == 0 {
        return Err(invalid("reference transcript is empty"));
    }
    let edit_ops = edit_distance(hypothesis, reference);
    Ok(CerScore {
        value: edit_ops as f64 / ref_len as f64,
        edit_ops,
        ref_len,
    })
}
