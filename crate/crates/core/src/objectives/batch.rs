use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::interpolants::{
    interpolate, sample_gamma, DatasetSpec, GammaMode, Schedule, TimePairSampler,
};
use crate::rng::Rng;

/// Diagonal sub-batch: times `t`, interpolants `I_t` and velocities `İ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagBatch {
    pub t: Tensor,
    pub it: Tensor,
    pub dit: Tensor,
}

/// Off-diagonal sub-batch: `s < t`, starting points `I_s`, and the PSD
/// fractions `γ` when the method needs them.
#[derive(Clone, Debug, PartialEq)]
pub struct OffDiagBatch {
    pub s: Tensor,
    pub t: Tensor,
    pub is: Tensor,
    pub gamma: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub diag: DiagBatch,
    pub off: OffDiagBatch,
}

impl DiagBatch {
    pub fn len(&self) -> usize {
        self.t.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, start: usize, n: usize) -> DiagBatch {
        DiagBatch {
            t: self.t.slice_rows(start, n),
            it: self.it.slice_rows(start, n),
            dit: self.dit.slice_rows(start, n),
        }
    }
}

impl OffDiagBatch {
    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, start: usize, n: usize) -> OffDiagBatch {
        OffDiagBatch {
            s: self.s.slice_rows(start, n),
            t: self.t.slice_rows(start, n),
            is: self.is.slice_rows(start, n),
            gamma: self.gamma.as_ref().map(|g| g.slice_rows(start, n)),
        }
    }

    pub(crate) fn check_order(&self) -> Result<()> {
        match self
            .s
            .data()
            .iter()
            .zip(self.t.data())
            .position(|(s, t)| s >= t)
        {
            Some(j) => Err(Error::config(format!(
                "off-diagonal pair {j} has s = {} >= t = {}",
                self.s.data()[j],
                self.t.data()[j]
            ))),
            None => Ok(()),
        }
    }
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.diag.len() + self.off.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draws one training batch of size `m` at step `k`.
    ///
    /// Times (and `γ`, when `gamma` is set) come from `times_rng`; the
    /// coupling draws for the diagonal rows and then the off-diagonal rows
    /// come from `data_rng`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        dataset: &DatasetSpec,
        schedule: Schedule,
        sampler: &TimePairSampler,
        gamma: Option<GammaMode>,
        data_rng: &mut Rng,
        times_rng: &mut Rng,
        m: usize,
        k: u64,
    ) -> Result<TrainBatch> {
        let times = sampler.sample_times(times_rng, m, k)?;
        let gamma = gamma.map(|mode| {
            Tensor::column(
                (0..times.s.len())
                    .map(|_| sample_gamma(mode, times_rng))
                    .collect(),
            )
        });

        let t_diag = Tensor::column(times.diag);
        let (x0, x1) = dataset.sample_coupling(data_rng, t_diag.rows());
        let (it, dit) = interpolate(schedule, &x0, &x1, &t_diag);

        let s = Tensor::column(times.s);
        let t = Tensor::column(times.t);
        let (x0, x1) = dataset.sample_coupling(data_rng, s.rows());
        let (is, _) = interpolate(schedule, &x0, &x1, &s);

        Ok(TrainBatch {
            diag: DiagBatch { t: t_diag, it, dit },
            off: OffDiagBatch { s, t, is, gamma },
        })
    }

    /// Splits into `k` shards with the diagonal and off-diagonal rows each
    /// spread as evenly as possible, in order.
    pub fn shards(&self, k: usize) -> Vec<TrainBatch> {
        let k = k.max(1);
        let bounds = |n: usize, i: usize| (n * i / k, n * (i + 1) / k);
        (0..k)
            .map(|i| {
                let (d0, d1) = bounds(self.diag.len(), i);
                let (o0, o1) = bounds(self.off.len(), i);
                TrainBatch {
                    diag: self.diag.rows(d0, d1 - d0),
                    off: self.off.rows(o0, o1 - o0),
                }
            })
            .collect()
    }
}
