//! Analytic prefill FLOPs for a SwiGLU decoder, output head excluded.
//!
//! Per token and layer:
//!
//! ```text
//! c_qkv  = 2 · hidden · (head_num + 2 · kv_head_num) · head_size
//! c_attn = 2 · head_num · head_size · n_context
//! c_o    = 2 · hidden²
//! c_mlp  = 2 · 3 · hidden · intermediate
//! total  = batch · n_input · layer_num · (c_qkv + c_attn + c_o + c_mlp)
//! ```

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{FlopTally, ModelConfig};

/// How `n_context` is charged to a block of `n_input` new tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum CostConvention {
    /// Every new token is charged the full final context. This is the
    /// single-`n_context` formula and what the engine's counter measures.
    #[default]
    FullContext,
    /// Token `i` of the block is charged only the context it can see
    /// causally (`past + i + 1`). Tighter, but not the reference formula.
    PerTokenRamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub c_qkv: u64,
    /// Per-token attention cost at the full `n_context`.
    pub c_attn: u64,
    pub c_o: u64,
    pub c_mlp: u64,
    pub n_input: u64,
    pub n_context: u64,
    pub batch: u64,
    pub layer_num: u64,
    pub convention: CostConvention,
    pub total: u64,
}

impl FlopsReport {
    pub fn tflops(&self) -> f64 {
        self.total as f64 / 1e12
    }

    /// Totals per bucket, directly comparable to a measured [`FlopTally`].
    pub fn breakdown(&self) -> FlopTally {
        let per = self.batch * self.n_input * self.layer_num;
        let attn = match self.convention {
            CostConvention::FullContext => per * self.c_attn,
            CostConvention::PerTokenRamp => {
                let unit = self.c_attn / self.n_context;
                let past = self.n_context - self.n_input;
                let sum_ctx = self.n_input * past + self.n_input * (self.n_input + 1) / 2;
                self.batch * self.layer_num * unit * sum_ctx
            }
        };
        FlopTally {
            qkv: per * self.c_qkv,
            attn,
            o: per * self.c_o,
            mlp: per * self.c_mlp,
            lm_head: 0,
        }
    }
}

pub fn flops(
    config: &ModelConfig,
    n_input: u64,
    n_context: u64,
    batch: u64,
) -> Result<FlopsReport> {
    flops_with(
        config,
        n_input,
        n_context,
        batch,
        CostConvention::FullContext,
    )
}

pub fn flops_with(
    config: &ModelConfig,
    n_input: u64,
    n_context: u64,
    batch: u64,
    convention: CostConvention,
) -> Result<FlopsReport> {
    if n_input == 0 || n_context == 0 || batch == 0 {
        return Err(Error::Domain(format!(
            "token and batch counts must be positive (n_input={n_input}, n_context={n_context}, batch={batch})"
        )));
    }
    if n_context < n_input {
        return Err(Error::Domain(format!(
            "n_context {n_context} is smaller than n_input {n_input}"
        )));
    }
    let dims = [
        config.layer_num,
        config.head_num,
        config.kv_head_num,
        config.head_size,
        config.hidden_size,
        config.intermediate_size,
    ];
    if dims.contains(&0) {
        return Err(Error::Config("model dimensions must be positive".into()));
    }
    let hidden = config.hidden_size as u64;
    let head_num = config.head_num as u64;
    let kv_head_num = config.kv_head_num as u64;
    let head_size = config.head_size as u64;
    let c_qkv = 2 * hidden * (head_num + 2 * kv_head_num) * head_size;
    let c_attn = 2 * head_num * head_size * n_context;
    let c_o = 2 * hidden * hidden;
    let c_mlp = 2 * 3 * hidden * config.intermediate_size as u64;
    let mut report = FlopsReport {
        c_qkv,
        c_attn,
        c_o,
        c_mlp,
        n_input,
        n_context,
        batch,
        layer_num: config.layer_num as u64,
        convention,
        total: 0,
    };
    report.total = report.breakdown().model_total();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub naive: FlopsReport,
    pub turbo: FlopsReport,
    pub reduction_percent: f64,
}

/// One-shot prefill over `chunk + query` tokens versus prefilling only the
/// query over cached chunks.
pub fn compare(
    config: &ModelConfig,
    chunk_tokens: u64,
    query_tokens: u64,
    batch: u64,
) -> Result<Comparison> {
    let context = chunk_tokens + query_tokens;
    let naive = flops(config, context, context, batch)?;
    let turbo = flops(config, query_tokens, context, batch)?;
    Ok(Comparison {
        naive,
        turbo,
        reduction_percent: 100.0 * (1.0 - turbo.total as f64 / naive.total as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_config() -> ModelConfig {
        ModelConfig {
            layer_num: 1,
            head_num: 1,
            kv_head_num: 1,
            head_size: 1,
            hidden_size: 1,
            intermediate_size: 1,
            vocab_size: 1,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }

    #[test]
    fn all_ones_hand_evaluation() {
        // c_qkv = 2·1·3·1, c_attn = 2·1·1·1, c_o = 2·1², c_mlp = 2·3·1·1
        let r = flops(&unit_config(), 1, 1, 1).unwrap();
        assert_eq!((r.c_qkv, r.c_attn, r.c_o, r.c_mlp), (6, 2, 2, 6));
        assert_eq!(r.total, 16);
    }

    #[test]
    fn zero_counts_rejected() {
        let c = unit_config();
        assert!(flops(&c, 0, 1, 1).is_err());
        assert!(flops(&c, 1, 0, 1).is_err());
        assert!(flops(&c, 1, 1, 0).is_err());
        assert!(flops(&c, 2, 1, 1).is_err());
    }

    #[test]
    fn qwen_like_reduction() {
        let cmp = compare(&ModelConfig::qwen2_7b_like(), 8192, 128, 1).unwrap();
        assert!((cmp.reduction_percent - 98.46).abs() <= 0.5);
        // Attention cost is shared, so the reduction is exactly 1 - 128/8320.
        assert!((cmp.reduction_percent - 100.0 * (1.0 - 128.0 / 8320.0)).abs() < 1e-9);
    }

    #[test]
    fn batch_linearity() {
        let c = ModelConfig::qwen2_7b_like();
        let one = flops(&c, 8320, 8320, 1).unwrap().total;
        for b in [2, 4, 6, 8] {
            assert_eq!(flops(&c, 8320, 8320, b).unwrap().total, b * one);
        }
    }

    #[test]
    fn linear_in_n_input_at_fixed_context() {
        let c = ModelConfig::toy();
        let one = flops(&c, 1, 500, 1).unwrap().total;
        assert_eq!(flops(&c, 7, 500, 1).unwrap().total, 7 * one);
    }

    #[test]
    fn no_chunks_no_reduction() {
        let cmp = compare(&ModelConfig::toy(), 0, 64, 1).unwrap();
        assert_eq!(cmp.reduction_percent, 0.0);
    }

    #[test]
    fn more_chunk_tokens_more_reduction() {
        let c = ModelConfig::qwen2_7b_like();
        let mut last = -1.0;
        for chunks in [128, 256, 512, 1024, 2048, 4096, 8192, 16384] {
            let r = compare(&c, chunks, 128, 1).unwrap().reduction_percent;
            assert!(r > last);
            last = r;
        }
    }

    #[test]
    fn reduction_independent_of_depth() {
        let mut c = ModelConfig::qwen2_7b_like();
        let base = compare(&c, 8192, 128, 1).unwrap().reduction_percent;
        for layers in [1, 4] {
            c.layer_num = layers;
            let r = compare(&c, 8192, 128, 1).unwrap().reduction_percent;
            assert!((r - base).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_is_tighter() {
        let c = ModelConfig::toy();
        let full = flops(&c, 10, 30, 1).unwrap();
        let ramp = flops_with(&c, 10, 30, 1, CostConvention::PerTokenRamp).unwrap();
        // ramp charges contexts 21..=30 instead of 30 for every token
        let unit = 2 * 8 * 8 * 4;
        assert_eq!(
            full.breakdown().attn - ramp.breakdown().attn,
            unit * (0..10).sum::<u64>()
        );
        assert!(ramp.total < full.total);
    }
}
