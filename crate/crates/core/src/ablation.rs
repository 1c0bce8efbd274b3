//! Component ablations: each variant flips one toggle of the full model,
//! trains under the shared seed and is evaluated in both rank modes.

use std::fmt::Write as _;

use crate::config::{Config, Granularity, KernelKind, ModelConfig};
use crate::error::Result;
use crate::image::ImageSample;
use crate::metrics::MetricReport;
use crate::model::Model;
use crate::parallel;
use crate::retrieval::{evaluate, EvalSet, RankMode};
use crate::training::train;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Full,
    NoCrossAttention,
    NoCosineKernel,
    NoRelationLoss,
    NoRet,
    NoLearnableTokenizer,
    /// Sketch and photo encoder keep rate.
    KeepRate(f64),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoCrossAttention => "w/o CA".into(),
            Variant::NoCosineKernel => "w/o Cos-K".into(),
            Variant::NoRelationLoss => "w/o RN loss".into(),
            Variant::NoRet => "w/o [Ret]".into(),
            Variant::NoLearnableTokenizer => "w/o L-Tok".into(),
            Variant::KeepRate(r) => format!("keep {r}"),
        }
    }

    pub fn apply(&self, base: &Config) -> Config {
        let mut c = base.clone();
        match *self {
            Variant::Full => {}
            Variant::NoCrossAttention => c.model.cross_attention = false,
            Variant::NoCosineKernel => c.model.kernel = KernelKind::Concat,
            Variant::NoRelationLoss => c.train.relation_loss = false,
            Variant::NoRet => c.model.use_ret = false,
            Variant::NoLearnableTokenizer => c.model.learnable_tokenizer = false,
            Variant::KeepRate(r) => {
                c.model.keep_rate_sketch = r;
                c.model.keep_rate_photo = r;
            }
        }
        c
    }

    /// Change in scalar parameter count relative to the full model, derived
    /// from the configuration alone.
    pub fn param_delta(&self, m: &ModelConfig) -> i64 {
        let d = m.embed_dim as i64;
        let branches = if m.share_branches { 1 } else { 2 };
        match *self {
            Variant::Full | Variant::NoRelationLoss | Variant::KeepRate(_) => 0,
            Variant::NoCrossAttention => {
                let h = (m.embed_dim * m.mlp_ratio) as i64;
                let mlp = if m.ca_mlp { 2 * d * h + h + d } else { 0 };
                -(4 * d + 4 * (d * d + d) + mlp)
            }
            Variant::NoCosineKernel => (d * d + d) + d * d + (d + 1),
            Variant::NoRet => {
                let pos_row = if m.pos_embed { d } else { 0 };
                -branches * (d + pos_row)
            }
            Variant::NoLearnableTokenizer => {
                let count = m.conv_kernels.len();
                let mut c_in = m.channels as i64;
                let mut total = 0;
                for (i, &k) in m.conv_kernels.iter().enumerate() {
                    let c_out = (m.embed_dim >> (count - 1 - i)) as i64;
                    total += c_out * c_in * (k * k) as i64 + c_out;
                    c_in = c_out;
                }
                -branches * total
            }
        }
    }
}

/// Full model, the five component removals, then the keep-rate grid.
pub fn standard_plan() -> Vec<Variant> {
    let mut plan = vec![
        Variant::Full,
        Variant::NoCrossAttention,
        Variant::NoCosineKernel,
        Variant::NoRelationLoss,
        Variant::NoRet,
        Variant::NoLearnableTokenizer,
    ];
    plan.extend([1.0, 0.9, 0.7, 0.5].map(Variant::KeepRate));
    plan
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub ret: MetricReport,
    pub rn: MetricReport,
    pub first_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    /// Full-model count plus [`Variant::param_delta`].
    pub expected_params: usize,
    pub outcome: std::result::Result<VariantResult, String>,
}

impl AblationRow {
    pub fn parity_ok(&self) -> bool {
        self.params == self.expected_params
    }
}

fn run_variant(
    variant: Variant,
    base: &Config,
    pairs: &[(ImageSample, ImageSample)],
    test: &EvalSet,
) -> Result<(usize, VariantResult)> {
    let cfg = variant.apply(base);
    let mut model = Model::new(&cfg.model, cfg.train.seed)?;
    let params = model.num_params();
    let trace = train(&mut model, pairs, &cfg.train, |_| {})?;
    let (q, g) = test.embed(&model)?;
    let (_, ret) = evaluate(&model, &q, &g, RankMode::Ret, &cfg.eval, Granularity::Category)?;
    let (_, rn) = evaluate(&model, &q, &g, RankMode::Rn, &cfg.eval, Granularity::Category)?;
    let loss = |i: usize| trace.get(i).map_or(f64::NAN, |e| e.total);
    Ok((
        params,
        VariantResult {
            ret,
            rn,
            first_loss: loss(0),
            final_loss: loss(trace.len().wrapping_sub(1)),
        },
    ))
}

/// Trains and evaluates every variant; a failing variant is recorded and the
/// rest still run. With `concurrent` the variants run in parallel.
pub fn run_ablation(
    plan: &[Variant],
    base: &Config,
    pairs: &[(ImageSample, ImageSample)],
    test: &EvalSet,
    concurrent: bool,
) -> Result<Vec<AblationRow>> {
    let full = Model::new(&base.model, base.train.seed)?.num_params() as i64;
    let one = |v: &Variant| {
        let expected = (full + v.param_delta(&base.model)) as usize;
        match run_variant(*v, base, pairs, test) {
            Ok((params, r)) => AblationRow {
                variant: *v,
                params,
                expected_params: expected,
                outcome: Ok(r),
            },
            Err(e) => AblationRow {
                variant: *v,
                params: Model::new(&v.apply(base).model, base.train.seed).map_or(0, |m| m.num_params()),
                expected_params: expected,
                outcome: Err(e.to_string()),
            },
        }
    };
    Ok(if concurrent {
        parallel::map(plan, one)
    } else {
        plan.iter().map(one).collect()
    })
}

/// Tab-separated table, variant first.
pub fn table_to_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tparams\tparity\tstatus\tret_map\tret_acc@1\trn_map\trn_acc@1\trn_acc@10\tfirst_loss\tfinal_loss\n");
    for row in rows {
        let parity = if row.parity_ok() { "ok" } else { "MISMATCH" };
        let _ = write!(s, "{}\t{}\t{parity}", row.variant.name(), row.params);
        match &row.outcome {
            Ok(r) => {
                let acc = |m: &MetricReport, k: usize| m.acc_at.get(&k).map_or("-".into(), |v| format!("{v:.4}"));
                let _ = writeln!(
                    s,
                    "\tok\t{:.4}\t{}\t{:.4}\t{}\t{}\t{:.6}\t{:.6}",
                    r.ret.map,
                    acc(&r.ret, 1),
                    r.rn.map,
                    acc(&r.rn, 1),
                    acc(&r.rn, 10),
                    r.first_loss,
                    r.final_loss
                );
            }
            Err(e) => {
                let _ = writeln!(s, "\terror: {}\t-\t-\t-\t-\t-\t-\t-", e.replace(['\t', '\n'], " "));
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_variant_flips_one_toggle() {
        let base = Config::default();
        for v in standard_plan() {
            let c = v.apply(&base);
            let diffs = [
                c.model.cross_attention != base.model.cross_attention,
                c.model.kernel != base.model.kernel,
                c.train.relation_loss != base.train.relation_loss,
                c.model.use_ret != base.model.use_ret,
                c.model.learnable_tokenizer != base.model.learnable_tokenizer,
                c.model.keep_rate_sketch != base.model.keep_rate_sketch,
            ];
            let n = diffs.iter().filter(|&&d| d).count();
            assert!(n <= 1, "{}", v.name());
            assert_eq!(n == 0, v == Variant::Full || v == Variant::KeepRate(1.0), "{}", v.name());
        }
    }

    #[test]
    fn parameter_deltas_match_construction() {
        let base = Config::default();
        let full = Model::new(&base.model, 1).unwrap().num_params() as i64;
        for v in standard_plan() {
            let m = Model::new(&v.apply(&base).model, 1).unwrap();
            assert_eq!(m.num_params() as i64 - full, v.param_delta(&base.model), "{}", v.name());
        }
    }
}
