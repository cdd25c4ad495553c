use crate::error::{Error, Result};
use crate::primitive::SpacetimeGaussian;

/// Accumulated view-space positional gradient magnitude of one primitive.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradStat {
    pub accum: f64,
    pub count: u32,
}

impl GradStat {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.accum / self.count as f64
        }
    }
}

/// Fixed-budget population of spacetime Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    primitives: Vec<SpacetimeGaussian>,
    grad_stats: Vec<GradStat>,
    budget: usize,
}

impl GaussianCloud {
    pub fn new(budget: usize) -> Self {
        Self {
            primitives: Vec::new(),
            grad_stats: Vec::new(),
            budget,
        }
    }

    pub fn from_primitives(primitives: Vec<SpacetimeGaussian>, budget: usize) -> Result<Self> {
        if primitives.len() > budget {
            return Err(Error::InvalidInput(format!(
                "{} primitives exceed the budget of {budget}",
                primitives.len()
            )));
        }
        let grad_stats = vec![GradStat::default(); primitives.len()];
        Ok(Self {
            primitives,
            grad_stats,
            budget,
        })
    }

    pub fn push(&mut self, g: SpacetimeGaussian) -> Result<()> {
        if self.primitives.len() >= self.budget {
            return Err(Error::InvalidInput(format!("budget of {} reached", self.budget)));
        }
        self.primitives.push(g);
        self.grad_stats.push(GradStat::default());
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    #[inline]
    pub fn primitives(&self) -> &[SpacetimeGaussian] {
        &self.primitives
    }

    #[inline]
    pub fn primitives_mut(&mut self) -> &mut [SpacetimeGaussian] {
        &mut self.primitives
    }

    pub fn grad_stats(&self) -> &[GradStat] {
        &self.grad_stats
    }

    pub fn grad_stats_mut(&mut self) -> &mut [GradStat] {
        &mut self.grad_stats
    }

    pub fn reset_grad_stats(&mut self) {
        self.grad_stats.fill(GradStat::default());
    }

    /// Adds per-primitive view-space gradient norms from one rendered view.
    /// Only entries with `visible[i]` increase the count.
    pub fn accumulate_grad_stats(&mut self, norms: &[f64], visible: &[bool]) {
        debug_assert_eq!(norms.len(), self.len());
        for ((stat, &n), &vis) in self.grad_stats.iter_mut().zip(norms).zip(visible) {
            if vis {
                stat.accum += n;
                stat.count += 1;
            }
        }
    }

    /// Copy containing only the primitives selected by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(usize, &SpacetimeGaussian) -> bool) -> Self {
        let mut out = Self::new(self.budget);
        for (i, g) in self.primitives.iter().enumerate() {
            if keep(i, g) {
                out.primitives.push(g.clone());
                out.grad_stats.push(self.grad_stats[i]);
            }
        }
        out
    }

    /// Indices of primitives holding non-finite parameters.
    pub fn non_finite_indices(&self) -> Vec<usize> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.is_finite())
            .map(|(i, _)| i)
            .collect()
    }
}
