//! Analytic parameter and multiply-accumulate counts, per module, for one
//! forward pass of one batch element. FLOPs are reported as exactly 2×MACs.

use crate::ssm::{MambaBlock, MambaConfig};

use super::{Ablation, ModelConfig};

#[derive(Clone, Debug)]
pub struct ComplexityRow {
    pub module: String,
    pub params: usize,
    pub macs: usize,
}

#[derive(Clone, Debug)]
pub struct ComplexityReport {
    pub rows: Vec<ComplexityRow>,
    pub total_params: usize,
    pub total_macs: usize,
}

impl ComplexityReport {
    pub fn total_flops(&self) -> usize {
        2 * self.total_macs
    }
}

/// Closed form for a lone linear layer: params = f_in·f_out + f_out,
/// MACs over n tokens = n·f_in·f_out.
pub fn linear_layer_counts(f_in: usize, f_out: usize, n_tokens: usize) -> (usize, usize) {
    (f_in * f_out + f_out, n_tokens * f_in * f_out)
}

fn mamba_cfg(cfg: &ModelConfig, d_model: usize) -> MambaConfig {
    MambaConfig { d_model, d_state: cfg.d_state, expand: cfg.expand, conv_width: cfg.conv_width }
}

/// Per-module counts for the configured variant. The graph propagation
/// (L·H, a B×B product) amortizes to `batch_size`·f MACs per sample.
pub fn count_complexity(cfg: &ModelConfig, batch_size: usize) -> ComplexityReport {
    let mut rows: Vec<ComplexityRow> = Vec::new();
    let hw = cfg.hw();
    let fusion = cfg.fusion_width;
    let (k_f, k_t, k_s) = cfg.effective_k();
    let score_width = cfg.heads * cfg.d_k;

    if cfg.has_spectral() {
        let (t, c0, c) = (cfg.t, cfg.c0, cfg.spectral_channels);
        rows.push(ComplexityRow {
            module: "spectral.stem".into(),
            params: t * c * c0 + t * c,
            macs: hw * t * c0 * c,
        });
        rows.push(ComplexityRow {
            module: "spectral.score".into(),
            params: 2 * t * score_width,
            macs: hw * (2 * c * t * score_width + c * score_width),
        });
        let mc = mamba_cfg(cfg, t);
        rows.push(ComplexityRow {
            module: "spectral.mamba".into(),
            params: cfg.mamba_depth * MambaBlock::param_count(&mc),
            macs: hw * cfg.mamba_depth * MambaBlock::macs(&mc, k_f),
        });
        let (p, m) = linear_layer_counts(t, fusion, 1);
        rows.push(ComplexityRow { module: "spectral.proj".into(), params: p, macs: m });
    }

    if cfg.has_temporal() {
        let (t, c0, c) = (cfg.t, cfg.c0, cfg.spectral_channels);
        rows.push(ComplexityRow {
            module: "temporal.stem".into(),
            params: c0 * c + c,
            macs: hw * t * c0 * c,
        });
        rows.push(ComplexityRow {
            module: "temporal.score".into(),
            params: 2 * c * score_width,
            macs: hw * (2 * t * c * score_width + t * score_width),
        });
        let mc = mamba_cfg(cfg, c);
        rows.push(ComplexityRow {
            module: "temporal.mamba".into(),
            params: cfg.mamba_depth * MambaBlock::param_count(&mc),
            macs: hw * cfg.mamba_depth * MambaBlock::macs(&mc, k_t),
        });
        let (p, m) = linear_layer_counts(c, fusion, 1);
        rows.push(ComplexityRow { module: "temporal.proj".into(), params: p, macs: m });
    }

    if cfg.has_spatial() {
        let (series, d) = (cfg.series_len(), cfg.spatial_dim);
        rows.push(ComplexityRow {
            module: "spatial.stem".into(),
            params: series * d + d,
            macs: hw * series * d,
        });
        rows.push(ComplexityRow {
            module: "spatial.score".into(),
            params: 0,
            macs: hw * 2 * d,
        });
        let mc = mamba_cfg(cfg, d);
        rows.push(ComplexityRow {
            module: "spatial.mamba".into(),
            params: cfg.mamba_depth * MambaBlock::param_count(&mc),
            macs: cfg.mamba_depth * MambaBlock::macs(&mc, k_s),
        });
        let (p, m) = linear_layer_counts(d, fusion, 1);
        rows.push(ComplexityRow { module: "spatial.proj".into(), params: p, macs: m });
    }

    if cfg.has_entangled() {
        let slice = hw * cfg.c0;
        let e = cfg.entangled_dim;
        rows.push(ComplexityRow {
            module: "entangled.in".into(),
            params: slice * e + e,
            macs: cfg.t * slice * e,
        });
        let mc = mamba_cfg(cfg, e);
        rows.push(ComplexityRow {
            module: "entangled.mamba".into(),
            params: cfg.mamba_depth * MambaBlock::param_count(&mc),
            macs: cfg.mamba_depth * MambaBlock::macs(&mc, cfg.t),
        });
        let (p, m) = linear_layer_counts(e, fusion, 1);
        rows.push(ComplexityRow { module: "entangled.proj".into(), params: p, macs: m });
    }

    let mut gcn_params = 0usize;
    let mut gcn_macs = 0usize;
    for l in 0..cfg.gcn_depth {
        let f_in = if l == 0 { cfg.flat_len() } else { cfg.gcn_width };
        gcn_params += f_in * cfg.gcn_width + cfg.gcn_width + 2 * cfg.gcn_width;
        gcn_macs += f_in * cfg.gcn_width;
        if matches!(cfg.ablation, Ablation::WoGraph) {
            continue; // plain MLP: no propagation product
        }
        gcn_macs += batch_size * f_in;
    }
    rows.push(ComplexityRow { module: "graph".into(), params: gcn_params, macs: gcn_macs });

    let fin = cfg.fusion_input_width();
    let (p, m) = linear_layer_counts(fin, fusion, 1);
    rows.push(ComplexityRow { module: "fusion".into(), params: p, macs: m });
    let (p, m) = linear_layer_counts(fusion, cfg.classes, 1);
    rows.push(ComplexityRow { module: "head".into(), params: p, macs: m });

    let total_params = rows.iter().map(|r| r.params).sum();
    let total_macs = rows.iter().map(|r| r.macs).sum();
    ComplexityReport { rows, total_params, total_macs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn linear_closed_form() {
        let (p, m) = linear_layer_counts(10, 7, 13);
        assert_eq!(p, 10 * 7 + 7);
        assert_eq!(m, 13 * 10 * 7);
    }

    #[test]
    fn flops_are_twice_macs() {
        let cfg = ModelConfig::new(9);
        let rep = count_complexity(&cfg, 64);
        assert_eq!(rep.total_flops(), 2 * rep.total_macs);
        let row_sum: usize = rep.rows.iter().map(|r| r.macs).sum();
        assert_eq!(row_sum, rep.total_macs);
    }

    #[test]
    fn analytic_params_match_the_store_for_every_variant() {
        for ablation in Ablation::ALL {
            let mut cfg = ModelConfig::tiny(3);
            cfg.ablation = ablation;
            let model: Model<f64> = Model::init(cfg.clone()).unwrap();
            let rep = count_complexity(&cfg, 8);
            assert_eq!(
                rep.total_params,
                model.param_count(),
                "analytic count diverges for {ablation}"
            );
        }
    }

    #[test]
    fn default_config_lands_in_the_parameter_window() {
        let cfg = ModelConfig::new(9);
        let rep = count_complexity(&cfg, 64);
        let millions = rep.total_params as f64 / 1e6;
        assert!((1.0..=1.6).contains(&millions), "params {millions:.3}M");
    }

    #[test]
    fn every_ablation_is_no_larger_than_full() {
        let full = {
            let cfg = ModelConfig::new(9);
            count_complexity(&cfg, 64).total_params
        };
        for ablation in Ablation::ALL {
            let mut cfg = ModelConfig::new(9);
            cfg.ablation = ablation;
            let p = count_complexity(&cfg, 64).total_params;
            assert!(p <= full, "{ablation} has {p} params vs full {full}");
            if matches!(ablation, Ablation::WoSparsity | Ablation::WoGraph) {
                assert_eq!(p, full, "{ablation} should keep the parameter pathway");
            } else if ablation != Ablation::Full {
                assert!(p < full, "{ablation} should drop parameters");
            }
        }
    }
}
