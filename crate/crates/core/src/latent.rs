//! Latent-space analysis: encode a corpus, normalize each latent dimension
//! by its empirical CDF, find principal directions, and decode walks.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::forge::{ClassPalette, LabelMap, RgbImage};
use crate::nn::Tensor;
use crate::sketch::SketchVae;

/// `N × d` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl LatentMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for {rows}x{cols}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent matrix".into()));
        }
        Ok(LatentMatrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    fn require_rows(&self, min: usize, what: &str) -> Result<()> {
        if self.rows < min {
            return Err(Error::Input(format!("{what} needs at least {min} rows, got {}", self.rows)));
        }
        Ok(())
    }
}

/// Row `i` = posterior mean of `maps[i]`.
pub fn encode_corpus(model: &SketchVae, maps: &[&LabelMap]) -> Result<LatentMatrix> {
    if maps.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let d = model.config.latent_dim;
    let mut data = Vec::with_capacity(maps.len() * d);
    for chunk in maps.chunks(64) {
        data.extend(model.encode_means(chunk)?.data().iter().map(|&v| v as f64));
    }
    LatentMatrix::new(maps.len(), d, data)
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Per column, replace each value by `rank / (N + 1)`.
pub fn cdf_normalize(m: &LatentMatrix) -> Result<LatentMatrix> {
    m.require_rows(2, "CDF normalization")?;
    let mut out = vec![0.0; m.data.len()];
    let denom = (m.rows + 1) as f64;
    for j in 0..m.cols {
        for (i, r) in average_ranks(&m.column(j)).into_iter().enumerate() {
            out[i * m.cols + j] = r / denom;
        }
    }
    LatentMatrix::new(m.rows, m.cols, out)
}

/// Empirical quantile functions of a corpus, one per column: linear
/// between the points `(k / (N + 1), x₍ₖ₎)`, clamped outside.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalQuantiles {
    sorted: Vec<Vec<f64>>,
}

impl EmpiricalQuantiles {
    pub fn fit(m: &LatentMatrix) -> Result<Self> {
        m.require_rows(2, "quantile fit")?;
        let sorted = (0..m.cols)
            .map(|j| {
                let mut c = m.column(j);
                c.sort_by(f64::total_cmp);
                c
            })
            .collect();
        Ok(EmpiricalQuantiles { sorted })
    }

    pub fn dims(&self) -> usize {
        self.sorted.len()
    }

    pub fn quantile(&self, dim: usize, u: f64) -> f64 {
        let s = &self.sorted[dim];
        let n = s.len();
        // 0-based fractional order-statistic index.
        let pos = u * (n + 1) as f64 - 1.0;
        let near = pos.round();
        if (pos - near).abs() < 1e-9 && (0.0..n as f64).contains(&near) {
            return s[near as usize];
        }
        if pos <= 0.0 {
            return s[0];
        }
        if pos >= (n - 1) as f64 {
            return s[n - 1];
        }
        let lo = pos.floor() as usize;
        let t = pos - lo as f64;
        s[lo] + t * (s[lo + 1] - s[lo])
    }

    /// Map a CDF-space row back to native latent coordinates.
    pub fn invert_row(&self, u: &[f64]) -> Vec<f64> {
        u.iter().enumerate().map(|(j, &v)| self.quantile(j, v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// One unit-norm component per row, by descending variance.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each component.
    pub variances: Vec<f64>,
    /// Share of total variance per component; all zero for constant data.
    pub ratios: Vec<f64>,
}

/// Principal components from the SVD of the centered matrix. Each
/// component's sign is fixed so its largest-magnitude entry is positive.
pub fn fit_pca(m: &LatentMatrix) -> Result<PcaBasis> {
    m.require_rows(2, "PCA")?;
    let (n, d) = (m.rows, m.cols);
    let mean: Vec<f64> = (0..d).map(|j| m.column(j).iter().sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| m.data[i * d + j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::NonFinite("SVD did not converge".into()))?;
    let mut components = Vec::with_capacity(v_t.nrows());
    for r in 0..v_t.nrows() {
        let mut c: Vec<f64> = v_t.row(r).iter().copied().collect();
        let lead = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
    }
    let variances: Vec<f64> = svd.singular_values.iter().map(|s| s * s / (n - 1) as f64).collect();
    let total: f64 = (0..d)
        .map(|j| m.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum();
    let ratios = if total > 0.0 {
        variances.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; variances.len()]
    };
    Ok(PcaBasis {
        mean,
        components,
        variances,
        ratios,
    })
}

impl PcaBasis {
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    /// Inverse of [`PcaBasis::project`] over the given leading coordinates.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &a) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += a * v;
            }
        }
        out
    }

    /// Points `mean + t·√var·component` for `steps` equidistant `t` in
    /// `[-extent, extent]`; a single step is the mean itself.
    pub fn walk_points(&self, component: usize, extent: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
        if component >= self.components.len() {
            return Err(Error::Input(format!(
                "component {component} out of range ({} available)",
                self.components.len()
            )));
        }
        if steps == 0 {
            return Err(Error::Input("a walk needs at least one step".into()));
        }
        let sd = self.variances[component].sqrt();
        Ok((0..steps)
            .map(|k| {
                let t = if steps == 1 {
                    0.0
                } else {
                    -extent + 2.0 * extent * k as f64 / (steps - 1) as f64
                };
                let mut coords = vec![0.0; self.components.len()];
                coords[component] = t * sd;
                self.reconstruct(&coords)
            })
            .collect())
    }
}

/// The full analysis for one corpus: CDF normalization, quantiles, PCA.
#[derive(Debug, Clone)]
pub struct LatentExplorer {
    pub corpus: LatentMatrix,
    pub normalized: LatentMatrix,
    pub quantiles: EmpiricalQuantiles,
    pub basis: PcaBasis,
}

impl LatentExplorer {
    pub fn fit(corpus: LatentMatrix) -> Result<Self> {
        let normalized = cdf_normalize(&corpus)?;
        let quantiles = EmpiricalQuantiles::fit(&corpus)?;
        let basis = fit_pca(&normalized)?;
        Ok(LatentExplorer {
            corpus,
            normalized,
            quantiles,
            basis,
        })
    }

    /// Native latent codes along a principal direction of the normalized space.
    pub fn walk_codes(&self, component: usize, extent: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .basis
            .walk_points(component, extent, steps)?
            .iter()
            .map(|u| self.quantiles.invert_row(u))
            .collect())
    }

    /// Decoded sketches along the walk.
    pub fn walk(&self, model: &SketchVae, component: usize, extent: f64, steps: usize) -> Result<Vec<LabelMap>> {
        let codes = self.walk_codes(component, extent, steps)?;
        let d = self.corpus.cols;
        if d != model.config.latent_dim {
            return Err(Error::Shape(format!("{d}-D corpus for a {}-D model", model.config.latent_dim)));
        }
        let flat: Vec<f32> = codes.iter().flatten().map(|&v| v as f32).collect();
        model.decode_maps(&Tensor::from_vec(&[codes.len(), d], flat)?)
    }
}

/// Frames side by side with a `gap`-pixel white separator.
pub fn contact_sheet(frames: &[LabelMap], palette: &ClassPalette, gap: usize) -> Result<RgbImage> {
    let first = frames.first().ok_or_else(|| Error::Input("no frames".into()))?;
    let (w, h) = (first.width, first.height);
    let total_w = frames.len() * w + (frames.len() - 1) * gap;
    let mut sheet = RgbImage::filled(total_w, h, [1.0; 3]);
    for (k, f) in frames.iter().enumerate() {
        if (f.width, f.height) != (w, h) {
            return Err(Error::Shape(format!("frame {k} is {}x{}", f.width, f.height)));
        }
        let img = palette.render(f);
        let x0 = k * (w + gap);
        for y in 0..h {
            for x in 0..w {
                sheet.set_pixel(y * total_w + x0 + x, img.pixel(y * w + x));
            }
        }
    }
    Ok(sheet)
}

/// Number of pairwise-distinct maps.
pub fn distinct_maps(frames: &[LabelMap]) -> usize {
    let mut seen: Vec<&LabelMap> = Vec::new();
    for f in frames {
        if !seen.contains(&f) {
            seen.push(f);
        }
    }
    seen.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> LatentMatrix {
        let cols = rows[0].len();
        LatentMatrix::new(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn ranks_over_n_plus_one() {
        let m = matrix(&[&[3.0], &[1.0], &[2.0]]);
        assert_eq!(cdf_normalize(&m).unwrap().data, [0.75, 0.25, 0.5]);
    }

    #[test]
    fn ties_share_the_middle() {
        let m = matrix(&[&[7.0], &[7.0], &[7.0], &[7.0]]);
        assert!(cdf_normalize(&m).unwrap().data.iter().all(|&v| v == 0.5));
        let m = matrix(&[&[1.0], &[2.0], &[2.0], &[5.0]]);
        assert_eq!(cdf_normalize(&m).unwrap().data, [0.2, 0.5, 0.5, 0.8]);
    }

    #[test]
    fn single_row_is_rejected() {
        let m = matrix(&[&[1.0, 2.0]]);
        assert!(cdf_normalize(&m).is_err());
        assert!(fit_pca(&m).is_err());
    }

    #[test]
    fn quantiles_interpolate_and_clamp() {
        let q = EmpiricalQuantiles::fit(&matrix(&[&[0.0], &[10.0], &[20.0]])).unwrap();
        assert_eq!(q.quantile(0, 0.25), 0.0);
        assert_eq!(q.quantile(0, 0.5), 10.0);
        assert!((q.quantile(0, 0.375) - 5.0).abs() < 1e-12);
        assert_eq!(q.quantile(0, 0.01), 0.0);
        assert_eq!(q.quantile(0, 0.99), 20.0);
    }

    #[test]
    fn line_gives_diagonal_component() {
        let m = matrix(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0], &[-3.0, -3.0]]);
        let b = fit_pca(&m).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.components[0][0] - s).abs() < 1e-12 && (b.components[0][1] - s).abs() < 1e-12);
        assert!((b.ratios[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_data_gives_zero_ratios() {
        let m = matrix(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert!(fit_pca(&m).unwrap().ratios.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn walk_shapes() {
        let m = matrix(&[&[0.0, 1.0], &[1.0, 0.0], &[2.0, 2.0], &[3.0, 1.0]]);
        let b = fit_pca(&m).unwrap();
        assert_eq!(b.walk_points(0, 1.0, 1).unwrap(), vec![b.mean.clone()]);
        let w = b.walk_points(0, 0.0, 5).unwrap();
        assert!(w.iter().all(|p| *p == w[0]));
        assert!(b.walk_points(2, 1.0, 3).is_err());
        assert!(b.walk_points(0, 1.0, 0).is_err());
    }

    #[test]
    fn sheet_places_frames_with_gap() {
        let p = ClassPalette::default();
        let frames = vec![LabelMap::filled(3, 2, 0), LabelMap::filled(3, 2, 4)];
        let s = contact_sheet(&frames, &p, 1).unwrap();
        assert_eq!((s.width, s.height), (7, 2));
        assert_eq!(s.pixel(3), [1.0; 3]);
        assert_eq!(s.pixel(4), p.color(4));
        assert_eq!(distinct_maps(&frames), 2);
    }
}
