//! Dataset complexity distributions: scoring, histograms, normal fits and
//! low/mid/high stratification.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::finetune::ClicModel;
use crate::heuristics::{heuristic_scorer, unknown_scorer, Scorer};
use crate::imagecore::load_image;
use crate::manifest::{Manifest, ManifestEntry};
use crate::par;

/// Default stratification thresholds.
pub const LOW_THRESHOLD: f64 = 0.3;
pub const HIGH_THRESHOLD: f64 = 0.7;
pub const DEFAULT_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub path: PathBuf,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub scorer: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredManifest {
    pub entries: Vec<ScoredEntry>,
    /// Entries that could not be scored, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

impl ScoredManifest {
    /// Takes the scores already present in a manifest.
    pub fn from_manifest(manifest: &Manifest, scorer: &str) -> Result<Self> {
        let entries = manifest
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let score = e.score.ok_or_else(|| Error::Manifest {
                    line: i + 1,
                    message: "entry has no score".into(),
                })?;
                Ok(ScoredEntry {
                    path: e.path.clone(),
                    score,
                    id: e.id.clone(),
                    scorer: scorer.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoredManifest {
            entries,
            failures: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn to_manifest(&self) -> Manifest {
        Manifest::new(
            self.entries
                .iter()
                .map(|e| {
                    let m = ManifestEntry::new(e.path.clone()).with_score(e.score);
                    match &e.id {
                        Some(id) => m.with_id(id.clone()),
                        None => m,
                    }
                })
                .collect(),
        )
    }

    /// JSON lines; the output also parses as a plain [`Manifest`].
    pub fn to_jsonl(&self, base: Option<&Path>) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let mut e = e.clone();
            if let Some(base) = base {
                e.path = crate::manifest::relative_to(&e.path, base);
            }
            out.push_str(&serde_json::to_string(&e).expect("scored entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        std::fs::write(path, self.to_jsonl(Some(base))).map_err(|e| Error::io(path, e))
    }
}

/// Resolves a registry name. `clic` needs `model`.
pub fn resolve_scorer(name: &str, model: Option<ClicModel>) -> Result<Box<dyn Scorer>> {
    match (name, model) {
        ("clic", Some(m)) => Ok(Box::new(m)),
        ("clic", None) => heuristic_scorer("clic"),
        (other, _) if !crate::heuristics::SCORER_NAMES.contains(&other) => Err(unknown_scorer(other)),
        (other, _) => heuristic_scorer(other),
    }
}

/// Scores every entry. Entries that fail to load or score are logged and
/// listed in `failures`; the rest keep manifest order.
pub fn score_dataset(manifest: &Manifest, scorer: &dyn Scorer) -> ScoredManifest {
    let results = par::map(&manifest.entries, |e| {
        load_image(&e.path).and_then(|img| scorer.score(&img))
    });
    let mut out = ScoredManifest::default();
    for (e, r) in manifest.entries.iter().zip(results) {
        match r {
            Ok(s) => out.entries.push(ScoredEntry {
                path: e.path.clone(),
                score: s.value(),
                id: e.id.clone(),
                scorer: scorer.name().to_string(),
            }),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path.display());
                out.failures.push((e.path.clone(), err.to_string()));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` uniformly spaced edges from 0 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Bounds of the fullest bin (the first one on ties), `None` if empty.
    pub fn mode(&self) -> Option<(f64, f64)> {
        let max = *self.counts.iter().max()?;
        if max == 0 {
            return None;
        }
        let i = self.counts.iter().position(|&c| c == max)?;
        Some((self.edges[i], self.edges[i + 1]))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        out
    }

    /// Standalone SVG bar chart.
    pub fn to_svg(&self, title: &str) -> String {
        const W: f64 = 640.0;
        const H: f64 = 360.0;
        const PAD: f64 = 40.0;
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let plot_w = W - 2.0 * PAD;
        let plot_h = H - 2.0 * PAD;
        let bar_w = plot_w / self.bins() as f64;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
            W / 2.0,
            PAD / 2.0 + 5.0,
            escape_xml(title)
        );
        for (i, &c) in self.counts.iter().enumerate() {
            let h = plot_h * c as f64 / max;
            let _ = writeln!(
                out,
                r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#4a78b0"><title>[{}, {}): {}</title></rect>"##,
                PAD + i as f64 * bar_w,
                PAD + plot_h - h,
                bar_w,
                h,
                self.edges[i],
                self.edges[i + 1],
                c
            );
        }
        let base = PAD + plot_h;
        let _ = writeln!(
            out,
            r#"<line x1="{PAD}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
            W - PAD
        );
        for (x, label) in [(PAD, "0"), (W - PAD, "1")] {
            let _ = writeln!(
                out,
                r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{label}</text>"#,
                base + 16.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="12">{}</text>"#,
            PAD - 4.0,
            PAD + 4.0,
            max as usize
        );
        out.push_str("</svg>\n");
        out
    }
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Uniform bins over [0, 1]. Out-of-range scores are clamped and 1.0 lands
/// in the last bin.
pub fn histogram(scores: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let i = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalFit {
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub n: usize,
    /// Kolmogorov-Smirnov distance to the fitted normal.
    pub ks: f64,
    /// Set when `sigma == 0`; `ks` is then 0 since the fit is the same
    /// point mass as the data.
    pub degenerate: bool,
}

pub fn fit_normal(scores: &[f64]) -> Result<NormalFit> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: n,
        });
    }
    let nf = n as f64;
    let mu = scores.iter().sum::<f64>() / nf;
    let sigma = (scores.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / nf).sqrt();
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Ok(NormalFit {
            mu,
            sigma: 0.0,
            n,
            ks: 0.0,
            degenerate: true,
        });
    }
    let dist = Normal::new(mu, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ks = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = dist.cdf(x);
        ks = ks.max((i + 1) as f64 / nf - f).max(f - i as f64 / nf);
    }
    Ok(NormalFit {
        mu,
        sigma,
        n,
        ks: ks.clamp(0.0, 1.0),
        degenerate: false,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Strata {
    pub low: ScoredManifest,
    pub mid: ScoredManifest,
    pub high: ScoredManifest,
}

/// Splits into `score < lo`, `score > hi` and everything else.
pub fn stratify(scored: &ScoredManifest, lo: f64, hi: f64) -> Result<Strata> {
    if !(lo < hi) {
        return Err(Error::BadThresholds { lo, hi });
    }
    let mut out = Strata::default();
    for e in &scored.entries {
        let bucket = if e.score < lo {
            &mut out.low
        } else if e.score > hi {
            &mut out.high
        } else {
            &mut out.mid
        };
        bucket.entries.push(e.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{save_png, Image};
    use crate::rcm::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn scored(scores: &[f64]) -> ScoredManifest {
        ScoredManifest {
            entries: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| ScoredEntry {
                    path: PathBuf::from(format!("{i}.png")),
                    score: s,
                    id: None,
                    scorer: "test".into(),
                })
                .collect(),
            failures: vec![],
        }
    }

    #[test]
    fn scoring_constant_and_noise() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for i in 0..3 {
            let p = dir.path().join(format!("c{i}.png"));
            save_png(&Image::filled(16, 16, 3, 0.2 * i as f64), &p).unwrap();
            entries.push(ManifestEntry::new(p));
        }
        let mut rng = rng_from_seed(3);
        let p = dir.path().join("noise.png");
        save_png(&Image::from_fn(16, 16, 3, |_, _, _| rng.random()), &p).unwrap();
        entries.push(ManifestEntry::new(p));
        entries.push(ManifestEntry::new(dir.path().join("missing.png")));
        let m = Manifest::new(entries);
        let scorer = resolve_scorer("entropy", None).unwrap();
        let out = score_dataset(&m, scorer.as_ref());
        assert_eq!(out.len(), 4);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(&out.scores()[..3], &[0.0, 0.0, 0.0]);
        assert!(out.scores()[3] > 0.5);
        assert!(score_dataset(&Manifest::default(), scorer.as_ref()).is_empty());
    }

    #[test]
    fn scorer_resolution() {
        assert!(matches!(resolve_scorer("sharpness", None), Err(Error::UnknownScorer { .. })));
        assert!(matches!(resolve_scorer("clic", None), Err(Error::InvalidConfig(_))));
        assert_eq!(resolve_scorer("edge", None).unwrap().name(), "edge");
    }

    #[test]
    fn scored_output_reads_back_as_manifest() {
        let s = scored(&[0.25, 0.75]);
        let m = Manifest::parse(&s.to_jsonl(None)).unwrap();
        assert_eq!(m, s.to_manifest());
        assert_eq!(ScoredManifest::from_manifest(&m, "test").unwrap(), s);
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[0.1, 0.5, 0.9], 10).unwrap();
        let mut want = vec![0; 10];
        want[1] = 1;
        want[5] = 1;
        want[9] = 1;
        assert_eq!(h.counts, want);
        let h = histogram(&[1.0; 7], 10).unwrap();
        assert_eq!(h.counts[9], 7);
        assert_eq!(h.mode(), Some((0.9, 1.0)));
        assert!(histogram(&[0.5], 0).is_err());
        assert_eq!(histogram(&[], 4).unwrap().mode(), None);
    }

    #[test]
    fn histogram_exports() {
        let h = histogram(&[0.1, 0.6], 2).unwrap();
        assert_eq!(h.to_csv(), "bin_left,bin_right,count\n0,0.5,1\n0.5,1,1\n");
        let svg = h.to_svg("a <b>");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt;b&gt;"));
        assert_eq!(svg.matches("<title>").count(), 2);
    }

    #[test]
    fn two_point_fit() {
        let f = fit_normal(&[0.4, 0.6]).unwrap();
        assert!((f.mu - 0.5).abs() < 1e-15);
        assert!((f.sigma - 0.1).abs() < 1e-15);
        assert!(!f.degenerate);
        // Each point sits one sigma from the mean: D = max(0.5 - Φ(-1), Φ(1) - 1).
        let phi = Normal::new(0.0, 1.0).unwrap().cdf(1.0);
        assert!((f.ks - (phi - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn fit_edge_cases() {
        let f = fit_normal(&[0.3; 5]).unwrap();
        assert!(f.degenerate);
        assert_eq!((f.sigma, f.ks), (0.0, 0.0));
        assert!(matches!(fit_normal(&[0.5]), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn stratify_examples() {
        let s = scored(&[0.1, 0.5, 0.9]);
        let st = stratify(&s, LOW_THRESHOLD, HIGH_THRESHOLD).unwrap();
        assert_eq!(st.low.scores(), vec![0.1]);
        assert_eq!(st.mid.scores(), vec![0.5]);
        assert_eq!(st.high.scores(), vec![0.9]);
        let all = scored(&[0.0, 0.3, 0.7, 1.0]);
        let st = stratify(&all, 0.0, 1.0).unwrap();
        assert_eq!(st.mid.len(), 4);
        let st = stratify(&all, 0.3, 0.7).unwrap();
        assert_eq!((st.low.len(), st.mid.len(), st.high.len()), (1, 2, 1));
        assert!(matches!(stratify(&all, 0.5, 0.5), Err(Error::BadThresholds { .. })));
        assert!(stratify(&all, f64::NAN, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn fit_is_affine_equivariant(
            xs in prop::collection::vec(0.0f64..1.0, 3..60),
            a in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0],
            b in -2.0f64..2.0,
        ) {
            let f = fit_normal(&xs).unwrap();
            prop_assume!(f.sigma > 1e-6);
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let g = fit_normal(&ys).unwrap();
            prop_assert!((g.mu - (a * f.mu + b)).abs() < 1e-9);
            prop_assert!((g.sigma - a.abs() * f.sigma).abs() < 1e-9);
            prop_assert!((g.ks - f.ks).abs() < 1e-9);
        }

        #[test]
        fn histogram_conserves_and_ignores_order(
            mut xs in prop::collection::vec(0.0f64..=1.0, 0..200),
            bins in 1usize..64,
        ) {
            let h = histogram(&xs, bins).unwrap();
            prop_assert_eq!(h.total(), xs.len());
            xs.reverse();
            let k = xs.len() / 3;
            xs.rotate_left(k);
            prop_assert_eq!(histogram(&xs, bins).unwrap(), h);
        }

        #[test]
        fn stratify_partitions(
            xs in prop::collection::vec(0.0f64..=1.0, 0..200),
            lo in 0.0f64..0.5,
            gap in 0.01f64..0.5,
        ) {
            let s = scored(&xs);
            let st = stratify(&s, lo, lo + gap).unwrap();
            prop_assert_eq!(st.low.len() + st.mid.len() + st.high.len(), xs.len());
            let mut paths: Vec<_> = [&st.low, &st.mid, &st.high]
                .iter()
                .flat_map(|m| m.entries.iter().map(|e| e.path.clone()))
                .collect();
            paths.sort();
            paths.dedup();
            prop_assert_eq!(paths.len(), xs.len());
            prop_assert!(st.low.entries.iter().all(|e| e.score < lo));
            prop_assert!(st.high.entries.iter().all(|e| e.score > lo + gap));
        }
    }
}
