//! F1 scoring, per-language breakdowns and per-epoch curve reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Prf {
    /// Scores from counts, taking 0/0 as 0.
    pub fn from_counts(c: Counts) -> Prf {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub counts: Counts,
    pub scores: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub micro: Prf,
    pub macro_avg: Prf,
    pub items: usize,
}

impl MetricsReport {
    pub fn from_counts(names: &[String], counts: &[Counts], items: usize) -> MetricsReport {
        let classes: Vec<ClassMetrics> = names
            .iter()
            .zip(counts)
            .map(|(name, &c)| ClassMetrics {
                name: name.clone(),
                counts: c,
                scores: Prf::from_counts(c),
            })
            .collect();
        let total = counts.iter().fold(Counts::default(), |a, c| Counts {
            tp: a.tp + c.tp,
            fp: a.fp + c.fp,
            fn_: a.fn_ + c.fn_,
        });
        let n = classes.len().max(1) as f64;
        let macro_avg = Prf {
            precision: classes.iter().map(|c| c.scores.precision).sum::<f64>() / n,
            recall: classes.iter().map(|c| c.scores.recall).sum::<f64>() / n,
            f1: classes.iter().map(|c| c.scores.f1).sum::<f64>() / n,
        };
        MetricsReport {
            classes,
            micro: Prf::from_counts(total),
            macro_avg,
            items,
        }
    }

    pub fn support(&self) -> usize {
        self.classes.iter().map(|c| c.counts.support()).sum()
    }

    /// `class,precision,recall,f1,support` rows followed by the averages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for c in &self.classes {
            let s = c.scores;
            let _ = writeln!(out, "{},{:.4},{:.4},{:.4},{}", c.name, s.precision, s.recall, s.f1, c.counts.support());
        }
        for (label, s) in [("micro avg", self.micro), ("macro avg", self.macro_avg)] {
            let _ = writeln!(out, "{label},{:.4},{:.4},{:.4},{}", s.precision, s.recall, s.f1, self.support());
        }
        out
    }
}

/// Per-class one-vs-rest counts over aligned rows of class indicators.
pub fn class_counts(pred: &[Vec<bool>], gold: &[Vec<bool>], n_classes: usize) -> Result<Vec<Counts>> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!("{} predictions for {} gold items", pred.len(), gold.len())));
    }
    let mut counts = vec![Counts::default(); n_classes];
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != n_classes || g.len() != n_classes {
            return Err(Error::Contract(format!("label rows must have {n_classes} classes")));
        }
        for (c, count) in counts.iter_mut().enumerate() {
            match (p[c], g[c]) {
                (true, true) => count.tp += 1,
                (true, false) => count.fp += 1,
                (false, true) => count.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

/// Scores aligned prediction and gold rows. Single-label tasks pass one-hot rows.
pub fn f1_rows(pred: &[Vec<bool>], gold: &[Vec<bool>], names: &[String]) -> Result<MetricsReport> {
    let counts = class_counts(pred, gold, names.len())?;
    Ok(MetricsReport::from_counts(names, &counts, gold.len()))
}

/// Scores keyed predictions against keyed gold labels; both must cover the
/// same items.
pub fn f1_scores(pred: &BTreeMap<String, Vec<bool>>, gold: &BTreeMap<String, Vec<bool>>, names: &[String]) -> Result<MetricsReport> {
    check_coverage(pred, gold)?;
    let p: Vec<Vec<bool>> = pred.values().cloned().collect();
    let g: Vec<Vec<bool>> = gold.values().cloned().collect();
    f1_rows(&p, &g, names)
}

fn check_coverage(pred: &BTreeMap<String, Vec<bool>>, gold: &BTreeMap<String, Vec<bool>>) -> Result<()> {
    if pred.len() != gold.len() || pred.keys().zip(gold.keys()).any(|(a, b)| a != b) {
        let missing: Vec<&String> = gold.keys().filter(|k| !pred.contains_key(*k)).take(5).collect();
        let extra: Vec<&String> = pred.keys().filter(|k| !gold.contains_key(*k)).take(5).collect();
        return Err(Error::Contract(format!(
            "prediction coverage differs from gold (missing {missing:?}, extra {extra:?})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageReport {
    pub per_language: BTreeMap<String, MetricsReport>,
    /// Scored on the pooled item set.
    pub overall: MetricsReport,
}

impl LanguageReport {
    /// `language,f1_micro,f1_macro,items` with a final `all` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,f1_micro,f1_macro,items\n");
        for (lang, r) in &self.per_language {
            let _ = writeln!(out, "{lang},{:.4},{:.4},{}", r.micro.f1, r.macro_avg.f1, r.items);
        }
        let _ = writeln!(out, "all,{:.4},{:.4},{}", self.overall.micro.f1, self.overall.macro_avg.f1, self.overall.items);
        out
    }
}

/// Groups items by `languages[key]` and scores each group and the pool.
pub fn per_language_report(
    pred: &BTreeMap<String, Vec<bool>>,
    gold: &BTreeMap<String, Vec<bool>>,
    languages: &BTreeMap<String, String>,
    names: &[String],
) -> Result<LanguageReport> {
    check_coverage(pred, gold)?;
    let mut groups: BTreeMap<&str, (Vec<Vec<bool>>, Vec<Vec<bool>>)> = BTreeMap::new();
    for (key, g) in gold {
        let lang = languages
            .get(key)
            .ok_or_else(|| Error::Contract(format!("item {key} has no language")))?;
        let entry = groups.entry(lang.as_str()).or_default();
        entry.0.push(pred[key].clone());
        entry.1.push(g.clone());
    }
    let mentioned: BTreeSet<&str> = languages.values().map(String::as_str).collect();
    for lang in mentioned.difference(&groups.keys().copied().collect()) {
        log::warn!("language {lang} has no gold items; omitted from the report");
    }
    let mut per_language = BTreeMap::new();
    for (lang, (p, g)) in groups {
        per_language.insert(lang.to_string(), f1_rows(&p, &g, names)?);
    }
    Ok(LanguageReport {
        per_language,
        overall: f1_scores(pred, gold, names)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub f1_macro: f64,
    raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochCurves {
    pub series: BTreeMap<String, Vec<CurvePoint>>,
}

impl EpochCurves {
    /// Epoch of the maximum F1 per language, earliest on ties.
    pub fn best_epochs(&self) -> BTreeMap<String, usize> {
        self.series
            .iter()
            .filter_map(|(lang, pts)| {
                let mut best: Option<&CurvePoint> = None;
                for p in pts {
                    if best.map_or(true, |b| p.f1_macro > b.f1_macro) {
                        best = Some(p);
                    }
                }
                best.map(|b| (lang.clone(), b.epoch))
            })
            .collect()
    }
}

/// Parses the per-epoch metrics TSV written by training. Rows without a
/// validation score (`NA`) are skipped.
pub fn parse_metrics_tsv(text: &str) -> Result<EpochCurves> {
    let mut series: BTreeMap<String, Vec<CurvePoint>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || (i == 0 && line.starts_with("epoch")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let epoch: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad epoch {:?}", fields[0]),
        })?;
        if fields[2] == "NA" {
            continue;
        }
        let f1: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad f1_macro {:?}", fields[2]),
        })?;
        series.entry(fields[1].to_string()).or_default().push(CurvePoint {
            epoch,
            f1_macro: f1,
            raw: fields[2].to_string(),
        });
    }
    for pts in series.values_mut() {
        pts.sort_by_key(|p| p.epoch);
    }
    Ok(EpochCurves { series })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveReport {
    pub csv: String,
    pub svg: String,
    pub best_epochs: BTreeMap<String, usize>,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Per-language validation F1 over epochs as CSV plus an SVG line chart
/// with a dashed marker at each language's best epoch.
pub fn epoch_curve_report(tsv: &str) -> Result<CurveReport> {
    let curves = parse_metrics_tsv(tsv)?;
    let best = curves.best_epochs();

    let mut csv = String::from("language,epoch,f1_macro,best\n");
    for (lang, pts) in &curves.series {
        for p in pts {
            let _ = writeln!(csv, "{lang},{},{},{}", p.epoch, p.raw, (best[lang] == p.epoch) as u8);
        }
    }

    let (w, h, m) = (640.0, 400.0, 48.0);
    let max_epoch = curves
        .series
        .values()
        .flat_map(|p| p.iter().map(|x| x.epoch))
        .max()
        .unwrap_or(1)
        .max(2) as f64;
    let x = |e: usize| m + (e as f64 - 1.0) / (max_epoch - 1.0) * (w - 2.0 * m);
    let y = |f: f64| h - m - f.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{0}" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">Epoch</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(svg, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">Validation F1 macro</text>"#, h / 2.0, h / 2.0);
    for (i, (lang, pts)) in curves.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", x(p.epoch), y(p.f1_macro))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline data-language="{lang}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let bx = x(best[lang]);
        let _ = writeln!(
            svg,
            r#"<line data-best="{lang}" data-epoch="{}" x1="{bx:.2}" y1="{m}" x2="{bx:.2}" y2="{}" stroke="{color}" stroke-dasharray="4 3"/>"#,
            best[lang],
            h - m
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{lang}</text>"#,
            w - m + 6.0,
            m + 14.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    Ok(CurveReport { csv, svg, best_epochs: best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn keyed(rows: &[Vec<bool>]) -> BTreeMap<String, Vec<bool>> {
        rows.iter().enumerate().map(|(i, r)| (format!("{i:03}"), r.clone())).collect()
    }

    #[test]
    fn perfect_predictions() {
        let gold = vec![vec![true, false], vec![false, true], vec![true, true]];
        let r = f1_rows(&gold, &gold, &names(2)).unwrap();
        assert_eq!(r.micro, Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(r.macro_avg.f1, 1.0);
    }

    #[test]
    fn absent_class_scores_zero() {
        let gold = vec![vec![true, false]];
        let r = f1_rows(&gold, &gold, &names(2)).unwrap();
        assert_eq!(r.classes[1].scores.f1, 0.0);
        assert_eq!(r.macro_avg.f1, 0.5);
    }

    #[test]
    fn coverage_mismatch_is_contract_error() {
        let a = keyed(&[vec![true]]);
        let b = keyed(&[vec![true], vec![false]]);
        assert!(matches!(f1_scores(&a, &b, &names(1)), Err(Error::Contract(_))));
    }

    #[test]
    fn per_language_rows_and_pool() {
        let gold = keyed(&[vec![true, false], vec![false, true], vec![true, false], vec![false, true]]);
        let mut pred = gold.clone();
        pred.insert("002".into(), vec![false, false]);
        pred.insert("003".into(), vec![false, false]);
        let langs: BTreeMap<String, String> = [("000", "en"), ("001", "en"), ("002", "de"), ("003", "de")]
            .iter()
            .map(|(k, l)| (k.to_string(), l.to_string()))
            .collect();
        let r = per_language_report(&pred, &gold, &langs, &names(2)).unwrap();
        assert_eq!(r.per_language["en"].micro.f1, 1.0);
        assert_eq!(r.per_language["de"].micro.f1, 0.0);
        assert!(r.overall.micro.f1 > 0.0 && r.overall.micro.f1 < 1.0);

        let one: BTreeMap<String, String> = gold.keys().map(|k| (k.clone(), "en".to_string())).collect();
        let r = per_language_report(&pred, &gold, &one, &names(2)).unwrap();
        assert_eq!(r.per_language["en"], r.overall);

        let mut missing = langs.clone();
        missing.remove("003");
        assert!(matches!(per_language_report(&pred, &gold, &missing, &names(2)), Err(Error::Contract(_))));
    }

    #[test]
    fn curve_markers_and_csv_mirror_tsv() {
        let mut tsv = String::from("epoch\tlanguage\tf1_macro\ttrain_loss\n");
        let pl = [0.5, 0.6, 0.7, 0.81, 0.8, 0.79];
        let ru = [0.2, 0.3, 0.3, 0.4, 0.45, 0.5];
        for e in 0..6 {
            tsv.push_str(&format!("{}\tpl\t{}\t0.5\n{}\tru\t{}\t0.5\n", e + 1, pl[e], e + 1, ru[e]));
        }
        let r = epoch_curve_report(&tsv).unwrap();
        assert_eq!(r.best_epochs["pl"], 4);
        assert_eq!(r.best_epochs["ru"], 6);
        assert!(r.csv.contains("pl,4,0.81,1\n"));
        assert!(r.csv.contains("ru,3,0.3,0\n"));
        assert!(r.svg.contains(r#"data-best="pl" data-epoch="4""#));

        let single = epoch_curve_report("epoch\tlanguage\tf1_macro\ttrain_loss\n1\ten\t0.3\t1.0\n1\tde\t0.2\t1.0\n").unwrap();
        assert_eq!(single.best_epochs.values().copied().collect::<Vec<_>>(), vec![1, 1]);
    }

    #[test]
    fn malformed_tsv_reports_line() {
        let err = parse_metrics_tsv("epoch\tlanguage\tf1_macro\ttrain_loss\n1\ten\t0.3\t1\n2\ten\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }
}
