//! Image quality (PSNR, SSIM) and identity-consistency retrieval.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::dataset::PairDataset;
use crate::data::image::Image;
use crate::data::stylize::StyleSplit;
use crate::error::{FdnnError, Result};
use crate::model::{Destylize, Generator};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MIN_MSE: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const FALLBACK_GRID: usize = 8;

fn same_shape(x: &Image, y: &Image, what: &str) -> Result<()> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(FdnnError::shape(format!(
            "{what}: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// PSNR for peak 1 given a mean squared error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MIN_MSE {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    same_shape(x, y, "psnr")?;
    let mse = x.tensor().sub(y.tensor())?.sum_sq()? / x.tensor().len() as f64;
    Ok(psnr_from_mse(mse))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / total);
        }
    }
    w
}

/// Mean SSIM over every full 11×11 window of the two luma planes.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    same_shape(x, y, "ssim")?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FdnnError::domain(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (lx, ly) = (x.luma_plane(), y.luma_plane());
    let win = gaussian_window();
    let k = SSIM_WINDOW;
    let mut total = 0.0;
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let at = |plane: &[f64], i: usize, j: usize| plane[(oy + i) * w + ox + j];
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = win[i * k + j];
                    mx += wt * at(&lx, i, j);
                    my += wt * at(&ly, i, j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = win[i * k + j];
                    let (dx, dy) = (at(&lx, i, j) - mx, at(&ly, i, j) - my);
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
            }
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|a| *a /= norm);
    } else {
        // an all-zero feature has no direction; give it the uniform one
        let u = 1.0 / (v.len() as f64).sqrt();
        v.iter_mut().for_each(|a| *a = u);
    }
    v
}

/// Identity features used for retrieval.
#[derive(Clone, Copy, Debug)]
pub enum Embedder<'a> {
    /// Generator encoder output at the bottleneck input.
    Bottleneck(&'a Generator),
    /// 8×8 block-averaged luma, for use without a trained model.
    Downsample,
}

impl Embedder<'_> {
    /// L2-normalized embedding of one image.
    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        match self {
            Embedder::Bottleneck(g) => {
                let s = g.image_size();
                if image.height() != s || image.width() != s {
                    return Err(FdnnError::shape(format!(
                        "image is {}x{} but the generator was built for {s}x{s}",
                        image.height(),
                        image.width()
                    )));
                }
                let batch = image.tensor().clone().reshape(&[1, 3, s, s])?;
                Ok(normalize(g.encode(&batch)?.into_data()))
            }
            Embedder::Downsample => {
                let (h, w) = (image.height(), image.width());
                let n = FALLBACK_GRID;
                if h < n || w < n {
                    return Err(FdnnError::domain(format!(
                        "downsample embedding needs at least {n}x{n} pixels"
                    )));
                }
                let luma = image.luma_plane();
                let mut v = Vec::with_capacity(n * n);
                for by in 0..n {
                    for bx in 0..n {
                        let (y0, y1) = (by * h / n, (by + 1) * h / n);
                        let (x0, x1) = (bx * w / n, (bx + 1) * w / n);
                        let mut sum = 0.0;
                        for y in y0..y1 {
                            sum += luma[y * w + x0..y * w + x1].iter().sum::<f64>();
                        }
                        v.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
                    }
                }
                Ok(normalize(v))
            }
        }
    }
}

/// `embed(G, image)` with bottleneck features.
pub fn embed(g: &Generator, image: &Image) -> Result<Vec<f64>> {
    Embedder::Bottleneck(g).embed(image)
}

/// An embedding tagged with its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub id: u64,
    pub embedding: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Probability that k items drawn without replacement from N, m of which
/// match, include at least one match: 1 − C(N−m, k) / C(N, k).
pub fn chance_top_k(n: usize, m: usize, k: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    if k >= n || n - m < k {
        return 1.0;
    }
    let mut miss = 1.0;
    for i in 0..k {
        miss *= (n - m - i) as f64 / (n - i) as f64;
    }
    1.0 - miss
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrrResult {
    pub rate: f64,
    pub queries: usize,
    pub gallery_size: usize,
    /// Mean number of same-identity gallery items per query.
    pub mean_matches: f64,
    /// Mean over queries of the hypergeometric chance rate.
    pub chance: f64,
    /// The cruder k/N approximation.
    pub chance_k_over_n: f64,
}

/// Top-k retrieval by cosine similarity. Equal similarities rank by gallery index.
pub fn consistency_frr(queries: &[Labeled], gallery: &[Labeled], k: usize) -> Result<FrrResult> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(FdnnError::domain("retrieval needs a nonempty query set and gallery"));
    }
    if k == 0 {
        return Err(FdnnError::config("k must be at least 1"));
    }
    let n = gallery.len();
    let (mut hits, mut chance, mut matches) = (0usize, 0.0, 0usize);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for q in queries {
        order.clear();
        order.extend(
            gallery
                .iter()
                .enumerate()
                .map(|(i, g)| (cosine(&q.embedding, &g.embedding), i)),
        );
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if order.iter().take(k).any(|&(_, i)| gallery[i].id == q.id) {
            hits += 1;
        }
        let m = gallery.iter().filter(|g| g.id == q.id).count();
        matches += m;
        chance += chance_top_k(n, m, k);
    }
    let nq = queries.len() as f64;
    Ok(FrrResult {
        rate: hits as f64 / nq,
        queries: queries.len(),
        gallery_size: n,
        mean_matches: matches as f64 / nq,
        chance: chance / nq,
        chance_k_over_n: (k as f64 / n as f64).min(1.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleConsistency {
    pub query_style: String,
    pub split: StyleSplit,
    #[serde(flatten)]
    pub result: FrrResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub k: usize,
    pub per_style: Vec<StyleConsistency>,
    /// The single-query-style protocol: the first seen style queried against
    /// all other styles. Falls back to the first style if none is seen.
    pub reference: StyleConsistency,
    /// Mean rate over seen / unseen query styles; `None` if the group is empty.
    pub seen_rate: Option<f64>,
    pub unseen_rate: Option<f64>,
    pub mean_rate: f64,
    pub mean_chance: f64,
    pub mean_chance_k_over_n: f64,
}

/// Destylizes every test image, then uses each style in turn as the query set
/// against all other styles as the gallery.
pub fn consistency(
    model: &dyn Destylize,
    embedder: Embedder<'_>,
    test: &PairDataset,
    k: usize,
) -> Result<ConsistencyReport> {
    if test.is_empty() {
        return Err(FdnnError::domain("test split is empty"));
    }
    let mut embedded = Vec::with_capacity(test.len());
    for r in &test.records {
        embedded.push(Labeled {
            id: r.id,
            embedding: embedder.embed(&model.destylize(&r.stylized)?)?,
        });
    }
    let mut per_style = Vec::new();
    for style in test.style_names() {
        let mut queries = Vec::new();
        let mut gallery = Vec::new();
        let mut split = StyleSplit::Seen;
        for (r, e) in test.records.iter().zip(&embedded) {
            if r.style == style {
                split = r.style_split;
                queries.push(e.clone());
            } else {
                gallery.push(e.clone());
            }
        }
        per_style.push(StyleConsistency {
            query_style: style,
            split,
            result: consistency_frr(&queries, &gallery, k)?,
        });
    }
    let group = |s: Option<StyleSplit>| -> Option<f64> {
        let rates: Vec<f64> = per_style
            .iter()
            .filter(|p| s.is_none_or(|s| p.split == s))
            .map(|p| p.result.rate)
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    };
    let ns = per_style.len() as f64;
    let reference = per_style
        .iter()
        .find(|p| p.split == StyleSplit::Seen)
        .unwrap_or(&per_style[0])
        .clone();
    Ok(ConsistencyReport {
        k,
        reference,
        seen_rate: group(Some(StyleSplit::Seen)),
        unseen_rate: group(Some(StyleSplit::Unseen)),
        mean_rate: group(None).unwrap_or(0.0),
        mean_chance: per_style.iter().map(|p| p.result.chance).sum::<f64>() / ns,
        mean_chance_k_over_n: per_style.iter().map(|p| p.result.chance_k_over_n).sum::<f64>() / ns,
        per_style,
    })
}

impl ConsistencyReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<7} {:>7} {:>8} {:>8} {:>8}",
            "query style", "split", "queries", "gallery", "top-k", "chance"
        );
        for p in &self.per_style {
            let _ = writeln!(
                out,
                "{:<16} {:<7} {:>7} {:>8} {:>8.4} {:>8.4}",
                p.query_style,
                split_name(p.split),
                p.result.queries,
                p.result.gallery_size,
                p.result.rate,
                p.result.chance
            );
        }
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "top-{} rate: seen {} unseen {} mean {:.4} (chance {:.4}, k/N {:.4})",
            self.k,
            fmt(self.seen_rate),
            fmt(self.unseen_rate),
            self.mean_rate,
            self.mean_chance,
            self.mean_chance_k_over_n
        );
        let _ = writeln!(
            out,
            "reference query style {}: top-{} rate {:.4} (chance {:.4})",
            self.reference.query_style, self.k, self.reference.result.rate, self.reference.result.chance
        );
        out
    }
}

fn split_name(s: StyleSplit) -> &'static str {
    match s {
        StyleSplit::Seen => "seen",
        StyleSplit::Unseen => "unseen",
    }
}

/// Quality of one group of pairs, for the model output and for the raw stylized input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub pairs: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRow {
    pub style: String,
    pub split: StyleSplit,
    #[serde(flatten)]
    pub quality: QualityRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_style: Vec<StyleRow>,
    pub seen: Option<QualityRow>,
    pub unseen: Option<QualityRow>,
    pub overall: QualityRow,
}

#[derive(Default)]
struct Acc {
    n: usize,
    sums: [f64; 4],
}

impl Acc {
    fn add(&mut self, v: [f64; 4]) {
        self.n += 1;
        self.sums.iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }

    fn row(&self) -> Option<QualityRow> {
        (self.n > 0).then(|| {
            let m = |i: usize| self.sums[i] / self.n as f64;
            QualityRow {
                pairs: self.n,
                psnr: m(0),
                ssim: m(1),
                baseline_psnr: m(2),
                baseline_ssim: m(3),
            }
        })
    }
}

/// Per-style and per-group mean PSNR/SSIM of `model` output against ground
/// truth, with the stylized input as the baseline.
pub fn evaluate(model: &dyn Destylize, test: &PairDataset) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(FdnnError::domain("test split is empty"));
    }
    let styles = test.style_names();
    let mut per_style: Vec<(Acc, StyleSplit)> = styles.iter().map(|_| (Acc::default(), StyleSplit::Seen)).collect();
    let (mut seen, mut unseen, mut all) = (Acc::default(), Acc::default(), Acc::default());
    for r in &test.records {
        let out = model.destylize(&r.stylized)?;
        let v = [
            psnr(&out, &r.real)?,
            ssim(&out, &r.real)?,
            psnr(&r.stylized, &r.real)?,
            ssim(&r.stylized, &r.real)?,
        ];
        let i = styles.iter().position(|s| *s == r.style).expect("style listed");
        per_style[i].0.add(v);
        per_style[i].1 = r.style_split;
        match r.style_split {
            StyleSplit::Seen => seen.add(v),
            StyleSplit::Unseen => unseen.add(v),
        }
        all.add(v);
    }
    Ok(MetricReport {
        per_style: styles
            .into_iter()
            .zip(per_style)
            .map(|(style, (acc, split))| StyleRow {
                style,
                split,
                quality: acc.row().expect("style has pairs"),
            })
            .collect(),
        seen: seen.row(),
        unseen: unseen.row(),
        overall: all.row().expect("nonempty"),
    })
}

impl MetricReport {
    /// Group summary laid out as method rows by seen/unseen PSNR and SSIM
    /// columns, followed by the per-style breakdown.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let cell = |r: &Option<QualityRow>, f: fn(&QualityRow) -> f64| {
            r.as_ref().map_or(format!("{:>9}", "-"), |r| format!("{:>9.4}", f(r)))
        };
        let _ = writeln!(out, "{:<16}|{:^21}|{:^21}", "", "Seen styles", "Unseen styles");
        let _ = writeln!(
            out,
            "{:<16}|{:>9}  {:>9} |{:>9}  {:>9}",
            "Method", "PSNR", "SSIM", "PSNR", "SSIM"
        );
        let rows: [(&str, fn(&QualityRow) -> f64, fn(&QualityRow) -> f64); 2] = [
            ("stylized input", |r| r.baseline_psnr, |r| r.baseline_ssim),
            ("destylized", |r| r.psnr, |r| r.ssim),
        ];
        for (name, p, s) in rows {
            let _ = writeln!(
                out,
                "{:<16}|{}  {} |{}  {}",
                name,
                cell(&self.seen, p),
                cell(&self.seen, s),
                cell(&self.unseen, p),
                cell(&self.unseen, s)
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<16} {:<7} {:>5} {:>9} {:>9} {:>9} {:>9}",
            "style", "split", "pairs", "PSNR in", "SSIM in", "PSNR out", "SSIM out"
        );
        for r in &self.per_style {
            let q = &r.quality;
            let _ = writeln!(
                out,
                "{:<16} {:<7} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                r.style,
                split_name(r.split),
                q.pairs,
                q.baseline_psnr,
                q.baseline_ssim,
                q.psnr,
                q.ssim
            );
        }
        out
    }
}
