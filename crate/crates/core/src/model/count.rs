use super::{layout, ModelConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    /// Token and position embeddings. The LM head is tied and adds nothing.
    pub embedding: u64,
    pub non_embedding: u64,
    /// `(group, count)`; groups: `embedding`, `attn.query`, `attn.kv`,
    /// `attn.out`, `mlp`, `norm`.
    pub components: Vec<(&'static str, u64)>,
}

impl ParamCount {
    pub fn component(&self, name: &str) -> u64 {
        self.components.iter().find(|(n, _)| *n == name).map_or(0, |&(_, c)| c)
    }
}

fn group(name: &str) -> &'static str {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if name == "tok_emb" || name == "pos_emb" {
        "embedding"
    } else if name.contains(".attn.") {
        match leaf {
            "w_k" | "w_v" => "attn.kv",
            "w_o" => "attn.out",
            _ => "attn.query",
        }
    } else if name.contains(".mlp.") {
        "mlp"
    } else {
        "norm"
    }
}

/// Exact parameter counts for `cfg`, read off the parameter layout.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let mut components: Vec<(&'static str, u64)> = ["embedding", "attn.query", "attn.kv", "attn.out", "mlp", "norm"]
        .map(|g| (g, 0))
        .to_vec();
    layout(cfg).visit(&mut |name, spec| {
        let g = group(&name);
        let slot = components.iter_mut().find(|(n, _)| *n == g).expect("known group");
        slot.1 += spec.numel();
    });
    let total = components.iter().map(|&(_, c)| c).sum();
    let embedding = components[0].1;
    Ok(ParamCount {
        total,
        embedding,
        non_embedding: total - embedding,
        components,
    })
}

/// `(base − loss) / base`.
pub fn relative_improvement(base: f64, loss: f64) -> Result<f64> {
    if !(base > 0.0) || !base.is_finite() || !loss.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "relative improvement needs a positive finite base and finite loss, got {base} and {loss}"
        )));
    }
    Ok((base - loss) / base)
}
