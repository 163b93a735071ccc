//! Head-averaged attention maps over the `[video ‖ text]` sequence.

use std::path::Path;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::fusion::{FrozenVlm, MultiInput};
use crate::tasks::{prepare, PromptOptions, TaskInstance};
use crate::tokenizer::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    /// `v0..v{T-1}` for frames, then token strings.
    pub labels: Vec<String>,
    pub key_valid: Vec<bool>,
    /// Row-major, query × key.
    pub weights: Vec<f64>,
}

impl AttentionMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.size();
        &self.weights[i * n..(i + 1) * n]
    }

    /// Each query row divided by its largest weight.
    pub fn renormalized(&self) -> Self {
        let n = self.size();
        let mut weights = self.weights.clone();
        for row in weights.chunks_mut(n) {
            let m = row.iter().cloned().fold(0.0, f64::max);
            if m > 0.0 {
                row.iter_mut().for_each(|x| *x /= m);
            }
        }
        Self {
            weights,
            ..self.clone()
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec![String::new()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (i, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.row(i).iter().map(|x| format!("{x:.8}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Attention of `layer` for the instance's first prompt, averaged over
/// heads (eval mode).
pub fn attention_matrix(
    model: &FrozenVlm,
    vocab: &Vocabulary,
    inst: &TaskInstance,
    opts: &PromptOptions,
    layer: usize,
) -> Result<AttentionMatrix> {
    let n_layers = model.lm_config.n_layers;
    if layer >= n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers });
    }
    let prompts = prepare(inst, vocab, model.lm_config.max_text_len, opts)?;
    let p = &prompts[0];
    let mut g = Graph::<f32>::inference();
    let item = MultiInput {
        video: p.video,
        text_ids: &p.tokens.ids,
        text_mask: &p.tokens.attention_mask,
    };
    let enc = model.view().forward_multimodal(&mut g, &[item], None, true)?;
    let (layout, probs) = g
        .attention_probs(enc.attention[layer])
        .expect("recorded node is an attention op");
    let n = layout.segments[0].1;
    let h = layout.n_heads;
    let mut weights = vec![0.0f64; n * n];
    for head in 0..h {
        let off = layout.block_offset(0, head);
        for (w, &p) in weights.iter_mut().zip(&probs[off..off + n * n]) {
            *w += p as f64 / h as f64;
        }
    }
    let frames = p.video.map_or(0, |v| v.frames());
    let mut labels: Vec<String> = (0..frames).map(|i| format!("v{i}")).collect();
    for &id in &p.tokens.ids {
        labels.push(vocab.token(id).unwrap_or("[UNK]").to_string());
    }
    Ok(AttentionMatrix {
        labels,
        key_valid: layout.key_valid.clone(),
        weights,
    })
}

/// Writes the raw map to `path` and, when asked, the renormalized copy to
/// `<stem>.renorm.csv` beside it.
pub fn dump_attention(
    model: &FrozenVlm,
    vocab: &Vocabulary,
    inst: &TaskInstance,
    opts: &PromptOptions,
    layer: usize,
    path: &Path,
    renormalized: bool,
) -> Result<AttentionMatrix> {
    let m = attention_matrix(model, vocab, inst, opts, layer)?;
    m.write_csv(path)?;
    if renormalized {
        m.renormalized().write_csv(&path.with_extension("renorm.csv"))?;
    }
    Ok(m)
}
