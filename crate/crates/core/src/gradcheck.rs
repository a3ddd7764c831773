//! Central-difference verification of the analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::Model;
use crate::error::Result;
use crate::loss::{batch_loss, loss_and_grads, GradOptions, LossConfig};
use crate::nn::Module;
use crate::story::Story;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            coords_per_tensor: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub len: usize,
    pub checked: usize,
    /// `None` for an empty tensor.
    pub max_rel_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
    pub overall_max: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.overall_max < tol
    }

    /// Names of groups whose error reaches `tol`.
    pub fn flagged(&self, tol: f64) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err.is_some_and(|e| e >= tol))
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn absent(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err.is_none())
            .map(|g| g.name.as_str())
            .collect()
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the model's analytic batch gradient against central differences.
pub fn finite_diff_check<R: Rng + ?Sized>(
    model: &Model,
    stories: &[Story],
    loss: &LossConfig,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradReport> {
    let analytic = loss_and_grads(model, stories, &GradOptions::new(*loss), 0)?.grads;
    compare_gradients(model, stories, loss, &analytic, cfg, rng)
}

/// Compares supplied gradients (one tensor per parameter) against central differences.
pub fn compare_gradients<R: Rng + ?Sized>(
    model: &Model,
    stories: &[Story],
    loss: &LossConfig,
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradReport> {
    let names: Vec<(String, usize)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    assert_eq!(names.len(), analytic.len(), "one gradient per parameter");

    let mut work = model.clone();
    let mut groups = Vec::with_capacity(names.len());
    let mut overall: f64 = 0.0;
    for (k, (name, len)) in names.into_iter().enumerate() {
        if len == 0 {
            groups.push(GroupReport {
                name,
                len,
                checked: 0,
                max_rel_err: None,
            });
            continue;
        }
        let picks = sample(rng, len, cfg.coords_per_tensor.min(len)).into_vec();
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let orig = param(&mut work, k).data()[i];
            param(&mut work, k).data_mut()[i] = orig + cfg.eps;
            let plus = batch_loss(&work, stories, loss)?;
            param(&mut work, k).data_mut()[i] = orig - cfg.eps;
            let minus = batch_loss(&work, stories, loss)?;
            param(&mut work, k).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
        overall = overall.max(worst);
        groups.push(GroupReport {
            name,
            len,
            checked: picks.len(),
            max_rel_err: Some(worst),
        });
    }
    Ok(GradReport {
        groups,
        overall_max: overall,
    })
}

fn param(model: &mut Model, k: usize) -> &mut Tensor {
    let mut all = Vec::new();
    model.params_mut(&mut all);
    all.swap_remove(k)
}
