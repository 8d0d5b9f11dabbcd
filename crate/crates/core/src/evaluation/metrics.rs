use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::mask::{BBox, LabelMask};

/// Intersection over union with inclusive integer coordinates.
pub fn iou_bbox(a: &BBox, b: &BBox) -> f64 {
    let row0 = a.row0.max(b.row0);
    let col0 = a.col0.max(b.col0);
    let row1 = a.row1.min(b.row1);
    let col1 = a.col1.min(b.col1);
    if row0 > row1 || col0 > col1 {
        return 0.0;
    }
    let inter = ((row1 - row0 + 1) * (col1 - col0 + 1)) as f64;
    inter / (a.area() as f64 + b.area() as f64 - inter)
}

/// Fraction of images whose predicted box has IoU strictly above 0.5.
pub fn corloc(preds: &[BBox], truths: &[BBox]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), truths.len())?;
    if preds.is_empty() {
        return Err(EvalError::Argument("corloc needs at least one image".into()));
    }
    let hits = preds
        .iter()
        .zip(truths)
        .filter(|(p, t)| iou_bbox(p, t) > 0.5)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean IoU over {background, foreground}; any nonzero label is foreground.
/// A class absent from both masks is left out of the mean.
pub fn miou_mask(pred: &LabelMask, truth: &LabelMask) -> Result<f64, EvalError> {
    if (pred.grid_h, pred.grid_w) != (truth.grid_h, truth.grid_w) {
        return Err(EvalError::Shape(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.grid_h, pred.grid_w, truth.grid_h, truth.grid_w
        )));
    }
    let mut ious = Vec::with_capacity(2);
    for fg in [false, true] {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
            let (p, t) = ((p != 0) == fg, (t != 0) == fg);
            inter += usize::from(p && t);
            union += usize::from(p || t);
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

struct Contingency {
    n: usize,
    cells: HashMap<(usize, usize), usize>,
    rows: HashMap<usize, usize>,
    cols: HashMap<usize, usize>,
}

impl Contingency {
    fn new(a: &[usize], b: &[usize], min_len: usize) -> Result<Self, EvalError> {
        check_lengths(a.len(), b.len())?;
        if a.len() < min_len {
            return Err(EvalError::Argument(format!(
                "labelings need at least {min_len} elements, got {}",
                a.len()
            )));
        }
        let mut cells = HashMap::new();
        let mut rows = HashMap::new();
        let mut cols = HashMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *cells.entry((x, y)).or_insert(0) += 1;
            *rows.entry(x).or_insert(0) += 1;
            *cols.entry(y).or_insert(0) += 1;
        }
        Ok(Self {
            n: a.len(),
            cells,
            rows,
            cols,
        })
    }
}

fn sorted_counts(map: &HashMap<usize, usize>) -> Vec<usize> {
    let mut entries: Vec<_> = map.iter().map(|(&k, &v)| (k, v)).collect();
    entries.sort_unstable();
    entries.into_iter().map(|(_, v)| v).collect()
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, `I(a;b) / sqrt(H(a) H(b))` in nats.
///
/// Two constant labelings score 1; exactly one constant labeling scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    let table = Contingency::new(a, b, 1)?;
    let n = table.n as f64;
    let h_a = entropy(&sorted_counts(&table.rows), n);
    let h_b = entropy(&sorted_counts(&table.cols), n);
    match (table.rows.len() == 1, table.cols.len() == 1) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let mut cells: Vec<_> = table.cells.iter().map(|(&k, &v)| (k, v)).collect();
    cells.sort_unstable();
    let mutual: f64 = cells
        .iter()
        .map(|&((x, y), c)| {
            let c = c as f64;
            let expected = table.rows[&x] as f64 * table.cols[&y] as f64;
            (c / n) * (n * c / expected).ln()
        })
        .sum();
    Ok((mutual / (h_a * h_b).sqrt()).clamp(0.0, 1.0))
}

fn pairs(c: usize) -> f64 {
    (c * c.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index (pair counting). A zero denominator, which only
/// happens for identical trivial labelings, scores 1.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    let table = Contingency::new(a, b, 2)?;
    let mut cells: Vec<_> = table.cells.iter().map(|(&k, &v)| (k, v)).collect();
    cells.sort_unstable();
    let index: f64 = cells.iter().map(|&(_, c)| pairs(c)).sum();
    let sum_a: f64 = sorted_counts(&table.rows).into_iter().map(pairs).sum();
    let sum_b: f64 = sorted_counts(&table.cols).into_iter().map(pairs).sum();
    let expected = sum_a * sum_b / pairs(table.n);
    let max_index = (sum_a + sum_b) / 2.0;
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Share of items that belong to the majority truth class of their cluster.
pub fn purity(pred: &[usize], truth: &[usize]) -> Result<f64, EvalError> {
    let table = Contingency::new(pred, truth, 1)?;
    let mut best: HashMap<usize, usize> = HashMap::new();
    for (&(p, _), &c) in &table.cells {
        let slot = best.entry(p).or_insert(0);
        *slot = (*slot).max(c);
    }
    Ok(best.values().sum::<usize>() as f64 / table.n as f64)
}

/// Per-image scores kept in a [`MetricReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_images: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub corloc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub purity: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_image: Vec<ImageRecord>,
}

impl MetricReport {
    pub fn localization(ids: &[String], preds: &[BBox], truths: &[BBox]) -> Result<Self, EvalError> {
        check_lengths(ids.len(), preds.len())?;
        let corloc = corloc(preds, truths)?;
        let per_image = ids
            .iter()
            .zip(preds.iter().zip(truths))
            .map(|(id, (p, t))| ImageRecord {
                id: id.clone(),
                iou: Some(iou_bbox(p, t)),
                miou: None,
            })
            .collect();
        Ok(Self {
            n_images: preds.len(),
            corloc: Some(corloc),
            per_image,
            ..Self::default()
        })
    }

    pub fn segmentation(ids: &[String], preds: &[LabelMask], truths: &[LabelMask]) -> Result<Self, EvalError> {
        check_lengths(ids.len(), preds.len())?;
        check_lengths(preds.len(), truths.len())?;
        if preds.is_empty() {
            return Err(EvalError::Argument("mIoU needs at least one image".into()));
        }
        let mut per_image = Vec::with_capacity(preds.len());
        for (id, (p, t)) in ids.iter().zip(preds.iter().zip(truths)) {
            per_image.push(ImageRecord {
                id: id.clone(),
                iou: None,
                miou: Some(miou_mask(p, t)?),
            });
        }
        let mean = per_image.iter().filter_map(|r| r.miou).sum::<f64>() / preds.len() as f64;
        Ok(Self {
            n_images: preds.len(),
            miou: Some(mean),
            per_image,
            ..Self::default()
        })
    }

    pub fn clustering(pred: &[usize], truth: &[usize]) -> Result<Self, EvalError> {
        Ok(Self {
            n_images: 1,
            nmi: Some(nmi(pred, truth)?),
            ari: Some(ari(pred, truth)?),
            purity: Some(purity(pred, truth)?),
            ..Self::default()
        })
    }
}

/// One line of a bounding-box file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub id: String,
    #[serde(flatten)]
    pub bbox: BBox,
}

/// Reads JSON lines of `{id, row0, col0, row1, col1}`; blank lines are skipped.
pub fn read_box_lines<R: BufRead>(source: R) -> Result<Vec<BoxRecord>, EvalError> {
    let mut out = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Parse(format!("line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BoxRecord = serde_json::from_str(&line)
            .map_err(|e| EvalError::Parse(format!("line {}: {e}", lineno + 1)))?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_known_values() {
        let a = BBox::new(0, 0, 1, 1);
        assert_eq!(iou_bbox(&a, &a), 1.0);
        assert_eq!(iou_bbox(&a, &BBox::new(3, 3, 4, 4)), 0.0);
        assert!((iou_bbox(&a, &BBox::new(1, 1, 2, 2)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn corloc_counts_strictly() {
        let a = BBox::new(0, 0, 1, 1);
        let far = BBox::new(5, 5, 6, 6);
        assert_eq!(corloc(&[a; 4], &[a, far, far, far]).unwrap(), 0.25);
        assert_eq!(corloc(&[a], &[far]).unwrap(), 0.0);
        // IoU exactly 0.5 does not count
        let half = BBox::new(0, 0, 1, 3);
        assert_eq!(iou_bbox(&a, &half), 0.5);
        assert_eq!(corloc(&[a], &[half]).unwrap(), 0.0);
        assert!(matches!(corloc(&[a], &[]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn miou_known_values() {
        let left: Vec<usize> = (0..16).map(|i| usize::from(i % 4 < 2)).collect();
        let top: Vec<usize> = (0..16).map(|i| usize::from(i < 8)).collect();
        let l = LabelMask::new(4, 4, left.clone()).unwrap();
        let t = LabelMask::new(4, 4, top).unwrap();
        assert_eq!(miou_mask(&l, &l).unwrap(), 1.0);
        assert!((miou_mask(&l, &t).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let comp = LabelMask::new(4, 4, left.iter().map(|&v| 1 - v).collect()).unwrap();
        assert_eq!(miou_mask(&l, &comp).unwrap(), 0.0);
        // background absent from both: only the foreground class counts
        let all = LabelMask::uniform(4, 4, 3);
        assert_eq!(miou_mask(&all, &LabelMask::uniform(4, 4, 1)).unwrap(), 1.0);
        assert!(miou_mask(&l, &LabelMask::uniform(2, 8, 0)).is_err());
    }

    #[test]
    fn nmi_conventions() {
        assert!((nmi(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 1, 2], &[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(nmi(&[4, 4], &[1, 1]).unwrap(), 1.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ari_pair_counting() {
        assert_eq!(ari(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap(), 0.0);
        assert_eq!(ari(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert!(ari(&[0], &[0]).is_err());
    }

    #[test]
    fn purity_known_values() {
        assert_eq!(purity(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!((purity(&[0; 6], &[0, 0, 1, 1, 2, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn box_lines_round_trip() {
        let text = "{\"id\":\"a\",\"row0\":1,\"col0\":2,\"row1\":3,\"col1\":4}\n\n{\"id\":\"b\",\"row0\":0,\"col0\":0,\"row1\":0,\"col1\":0}\n";
        let records = read_box_lines(text.as_bytes()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].bbox, BBox::new(1, 2, 3, 4));
        assert_eq!(serde_json::to_string(&records[0]).unwrap(), text.lines().next().unwrap());
        assert!(read_box_lines("{\"id\":1}".as_bytes()).is_err());
    }
}
