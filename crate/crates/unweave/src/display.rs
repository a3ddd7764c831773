//! 2-D display coordinates for clips, so annotators can work without video.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::io::{ClipDisplay, StoryRecord};

/// Projection onto the top two principal axes of a clip pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    mean: Vec<f64>,
    axes: [Vec<f64>; 2],
}

impl Projection {
    /// Fits on every clip of every story. Returns `None` for an empty pool or
    /// mixed dimensions.
    pub fn fit(stories: &[StoryRecord]) -> Option<Self> {
        let clips: Vec<&Vec<f64>> = stories.iter().flat_map(|s| s.clips.iter()).collect();
        let dim = clips.first()?.len();
        if dim == 0 || clips.iter().any(|c| c.len() != dim) {
            return None;
        }
        let n = clips.len() as f64;
        let mut mean = vec![0.0; dim];
        for c in &clips {
            for (m, v) in mean.iter_mut().zip(c.iter()) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for c in &clips {
            let d: Vec<f64> = c.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..dim {
                for j in 0..dim {
                    cov[(i, j)] += d[i] * d[j] / n;
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axis = |k: usize| -> Vec<f64> {
            match order.get(k) {
                Some(&i) => {
                    let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                    // fix the sign so the largest component is positive
                    let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
                    if big < 0.0 {
                        v.iter_mut().for_each(|x| *x = -*x);
                    }
                    v
                }
                None => vec![0.0; dim],
            }
        };
        Some(Self {
            mean,
            axes: [axis(0), axis(1)],
        })
    }

    pub fn project(&self, clip: &[f64]) -> [f64; 2] {
        let p = |axis: &[f64]| -> f64 { clip.iter().zip(&self.mean).zip(axis).map(|((v, m), a)| (v - m) * a).sum() };
        [p(&self.axes[0]), p(&self.axes[1])]
    }
}

/// Fills in `display` for stories that lack it.
pub fn attach_display(stories: &mut [StoryRecord]) {
    let Some(proj) = Projection::fit(stories) else { return };
    for s in stories.iter_mut().filter(|s| s.display.is_none()) {
        s.display = Some(
            s.clips
                .iter()
                .map(|c| ClipDisplay {
                    xy: proj.project(c),
                    media_url: None,
                })
                .collect(),
        );
    }
}
