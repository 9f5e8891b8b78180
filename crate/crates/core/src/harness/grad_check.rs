//! End-to-end finite-difference check on a micro configuration.

use crate::chi::cosine_similarity;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::harness::config::RunConfig;
use crate::harness::train::{make_batch, token_masks};
use crate::model::{Batch, Stmi};
use crate::params::{Graph, ParamSet};
use crate::sfm::Mode;
use crate::tape::Tape;
use crate::tensor::{with_precision, Precision, Tensor};

/// Minimum distance between any node similarity and the threshold.
pub const TAU_MARGIN: f64 = 1e-3;

/// 8×8 images in 4×4 patches, width 8, two heads, one layer per stage,
/// two identities with two training samples each.
pub fn micro_config(seed: u64) -> RunConfig {
    RunConfig {
        image_size: 8,
        channels: 3,
        patch: 4,
        dim: 8,
        depth: 1,
        heads: 2,
        num_queries: 2,
        chi_depth: 1,
        perturb_p: 0.0,
        rho: 0.25,
        num_ids: 2,
        per_id: 4,
        blob_size: 6,
        clutter: 0.5,
        ids_per_batch: 2,
        samples_per_id: 2,
        seed,
        ..RunConfig::default()
    }
}

pub struct GradCheckSetup {
    pub config: RunConfig,
    pub model: Stmi,
    pub params: ParamSet,
    pub batch: Batch,
}

impl GradCheckSetup {
    /// Builds the model and a batch of every training sample, then moves τ
    /// away from all node similarities.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let data = Dataset::synthesize(&config.generator())?;
        let masks = token_masks(&data, config.patch, config.rho)?;
        let batch = make_batch(&data, &masks, &data.indices(Split::Train))?;
        let (model, params) = Stmi::new(config.model(data.num_ids()), config.seed)?;
        let mut setup = Self {
            config,
            model,
            params,
            batch,
        };
        if setup.model.chi.is_some() {
            let tau = setup.choose_tau(setup.config.tau)?;
            setup.config.tau = tau;
            if let Some(chi) = setup.model.chi.as_mut() {
                chi.tau = tau;
            }
        }
        Ok(setup)
    }

    pub fn loss(&self, params: &ParamSet) -> Result<f64> {
        let tape = Tape::new();
        let g = Graph::new(&tape, params);
        let fwd = self.model.forward(&g, &self.batch, &mut Mode::Eval)?;
        let v = self.model.loss(&g, &fwd, &self.batch.labels)?.total.value().data()[0];
        Ok(v)
    }

    pub fn analytic(&self) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let g = Graph::new(&tape, &self.params);
        let fwd = self.model.forward(&g, &self.batch, &mut Mode::Eval)?;
        let total = self.model.loss(&g, &fwd, &self.batch.labels)?.total;
        let grads = tape.backward(total)?;
        Ok((total.value().data()[0], g.param_grads(&grads)))
    }

    /// Node similarities entering the hypergraph layer, off the diagonal.
    pub fn node_similarities(&self) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let g = Graph::new(&tape, &self.params);
        let fwd = self.model.forward(&g, &self.batch, &mut Mode::Eval)?;
        let mut out = Vec::new();
        for h in &fwd.token_sets {
            let s = cosine_similarity(&h.value())?;
            for i in 0..s.rows() {
                out.extend((0..s.cols()).filter(|&j| j != i).map(|j| s.at(i, j)));
            }
        }
        Ok(out)
    }

    /// The candidate nearest `start` (on a grid of `TAU_MARGIN` steps) with
    /// every similarity at least `TAU_MARGIN` away.
    fn choose_tau(&self, start: f64) -> Result<f64> {
        if self.model.config.chi_depth != 1 {
            return Err(Error::Config("threshold selection supports one hypergraph layer".into()));
        }
        let sims = self.node_similarities()?;
        let clear = |tau: f64| sims.iter().all(|s| (s - tau).abs() >= TAU_MARGIN);
        for k in 0..2000i32 {
            for sign in [1.0, -1.0] {
                let tau = start + sign * k as f64 * TAU_MARGIN;
                if (-1.0..=1.0).contains(&tau) && clear(tau) {
                    return Ok(tau);
                }
            }
        }
        Err(Error::Numeric("no threshold clears every node similarity".into()))
    }

    pub fn run(&mut self, opts: GradCheckOptions) -> Result<GradCheckReport> {
        with_precision(Precision::F64, || {
            let (_, analytic) = self.analytic()?;
            let mut params = self.params.clone();
            finite_diff_check(&mut params, &analytic, |p| self.loss(p), opts)
        })
    }
}
