//! KPIs from result files: classification SDE/DUE with per-bit and
//! per-layer breakdowns, detection IoU and image-wise corruption.
//!
//! SDE is measured against the fault-free leg, never against ground truth.
//! An inference whose faulty leg saw NaN or Inf is DUE and is not counted
//! as SDE.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault_gen::FaultRecord;
use crate::injector::{AppliedFault, FlipDirection};
use crate::model::Detection;
use crate::scenario::{InjectionTarget, RndMode};

/// Classes stored per classification row.
pub const TOP_K: usize = 5;

/// The `k` most likely classes with softmax probabilities, most likely
/// first. Ranking uses the logits: higher first, ties by ascending class
/// id, NaN last.
pub fn top_k(logits: &[f32], k: usize) -> Vec<(usize, f32)> {
    let max = logits.iter().copied().filter(|v| !v.is_nan()).fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().filter(|e| !e.is_nan()).sum();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (logits[a], logits[b]);
        match (x.is_nan(), y.is_nan()) {
            (false, false) => y.partial_cmp(&x).expect("not NaN").then(a.cmp(&b)),
            (nx, ny) => nx.cmp(&ny).then(a.cmp(&b)),
        }
    });
    order.truncate(k);
    order.into_iter().map(|c| (c, (exps[c] / sum) as f32)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Leg {
    Orig,
    Corr,
    Resil,
}

impl Leg {
    pub const ALL: [Leg; 3] = [Leg::Orig, Leg::Corr, Leg::Resil];

    pub fn as_str(self) -> &'static str {
        match self {
            Leg::Orig => "orig",
            Leg::Corr => "corr",
            Leg::Resil => "resil",
        }
    }
}

impl fmt::Display for Leg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Leg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Leg::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Results(format!("unknown leg `{s}`")))
    }
}

/// Where one applied fault hit. For weights, `channel` is the output
/// channel and `height`/`width` the kernel position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultLoc {
    pub layer: i64,
    pub channel: i64,
    pub height: i64,
    pub width: i64,
    /// Flipped bit; `None` outside bit-flip mode.
    pub bit: Option<u8>,
    pub direction: FlipDirection,
}

impl FaultLoc {
    pub fn new(record: &FaultRecord, direction: FlipDirection, target: InjectionTarget, mode: RndMode) -> Self {
        let c = record.coords;
        let (layer, channel) = match target {
            InjectionTarget::Neurons => (c[1], c[2]),
            InjectionTarget::Weights => (c[0], c[1]),
        };
        FaultLoc {
            layer,
            channel,
            height: c[4],
            width: c[5],
            bit: (mode == RndMode::BitFlip).then_some(record.value as u8),
            direction,
        }
    }

    pub fn from_applied(f: &AppliedFault, target: InjectionTarget, mode: RndMode) -> Self {
        FaultLoc::new(&f.record, f.direction, target, mode)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationRow {
    pub leg: Leg,
    pub image_id: u64,
    pub epoch: u64,
    pub gt_label: Option<usize>,
    /// Class ids, most likely first; `-1` pads models with fewer classes.
    pub top: [i64; TOP_K],
    pub prob: [f32; TOP_K],
    pub faults: Vec<FaultLoc>,
    pub nan: bool,
    pub inf: bool,
}

impl ClassificationRow {
    pub fn from_logits(leg: Leg, image_id: u64, epoch: u64, gt_label: Option<usize>, logits: &[f32]) -> Self {
        let mut top = [-1; TOP_K];
        let mut prob = [0.0; TOP_K];
        for (i, (c, p)) in top_k(logits, TOP_K).into_iter().enumerate() {
            top[i] = c as i64;
            prob[i] = p;
        }
        ClassificationRow {
            leg,
            image_id,
            epoch,
            gt_label,
            top,
            prob,
            faults: Vec::new(),
            nan: logits.iter().any(|v| v.is_nan()),
            inf: logits.iter().any(|v| v.is_infinite()),
        }
    }

    fn key(&self) -> (u64, u64) {
        (self.epoch, self.image_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub image_id: u64,
    pub epoch: u64,
    #[serde(with = "json_float")]
    pub detections: Vec<Detection>,
    pub faults: Vec<FaultLoc>,
    pub nan: bool,
    pub inf: bool,
}

impl DetectionRow {
    fn key(&self) -> (u64, u64) {
        (self.epoch, self.image_id)
    }
}

/// JSON has no NaN or Inf; such floats are written as the strings
/// `"NaN"`, `"inf"` and `"-inf"`.
mod json_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::Value;

    use crate::model::Detection;

    fn to_value(v: f32) -> Value {
        if v.is_finite() {
            Value::from(v as f64)
        } else {
            Value::from(v.to_string())
        }
    }

    fn from_value<E: serde::de::Error>(v: &Value) -> Result<f32, E> {
        match v {
            Value::Number(n) => n.as_f64().map(|x| x as f32).ok_or_else(|| E::custom("bad number")),
            Value::String(s) => s.parse().map_err(|_| E::custom(format!("bad float `{s}`"))),
            _ => Err(E::custom("expected a float")),
        }
    }

    #[derive(Serialize, Deserialize)]
    struct Raw {
        class: usize,
        score: Value,
        bbox: [Value; 4],
    }

    pub fn serialize<S: Serializer>(dets: &[Detection], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<Raw> = dets
            .iter()
            .map(|d| Raw {
                class: d.class,
                score: to_value(d.score),
                bbox: d.bbox.map(to_value),
            })
            .collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Detection>, D::Error> {
        let raw = Vec::<Raw>::deserialize(d)?;
        raw.iter()
            .map(|r| {
                let mut bbox = [0.0; 4];
                for (b, v) in bbox.iter_mut().zip(&r.bbox) {
                    *b = from_value(v)?;
                }
                Ok(Detection {
                    class: r.class,
                    score: from_value(&r.score)?,
                    bbox,
                })
            })
            .collect()
    }
}

// Classification CSV -------------------------------------------------------

fn join<T>(faults: &[FaultLoc], f: impl Fn(&FaultLoc) -> T) -> String
where
    T: fmt::Display,
{
    faults.iter().map(|l| f(l).to_string()).collect::<Vec<_>>().join(";")
}

fn classification_header(leg: Leg) -> Vec<String> {
    let mut h = vec!["image_id".to_string(), "epoch".into(), "gt_label".into()];
    h.extend((1..=TOP_K).map(|i| format!("{leg}_top{i}")));
    h.extend((1..=TOP_K).map(|i| format!("{leg}_p{i}")));
    for name in ["fault_layer", "fault_channel", "fault_height", "fault_width", "fault_bit", "flip_dir", "nan", "inf"] {
        h.push(name.into());
    }
    h
}

pub fn classification_csv_bytes(leg: Leg, rows: &[ClassificationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Results(e.to_string());
    w.write_record(classification_header(leg)).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.image_id.to_string(),
            r.epoch.to_string(),
            r.gt_label.map_or("-1".into(), |l| l.to_string()),
        ];
        rec.extend(r.top.iter().map(|c| c.to_string()));
        rec.extend(r.prob.iter().map(|p| p.to_string()));
        rec.push(join(&r.faults, |l| l.layer));
        rec.push(join(&r.faults, |l| l.channel));
        rec.push(join(&r.faults, |l| l.height));
        rec.push(join(&r.faults, |l| l.width));
        rec.push(join(&r.faults, |l| l.bit.map_or(-1, i64::from)));
        rec.push(join(&r.faults, |l| l.direction.code()));
        rec.push(u8::from(r.nan).to_string());
        rec.push(u8::from(r.inf).to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Results(e.to_string()))
}

pub fn write_classification_csv(leg: Leg, rows: &[ClassificationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, classification_csv_bytes(leg, rows)?).map_err(|e| Error::io(path, e))
}

fn parse_cell<T: FromStr>(cell: &str, what: &str, line: usize) -> Result<T> {
    cell.parse()
        .map_err(|_| Error::Results(format!("line {line}: bad {what} `{cell}`")))
}

fn split_cell<T: FromStr>(cell: &str, what: &str, line: usize) -> Result<Vec<T>> {
    if cell.is_empty() {
        return Ok(Vec::new());
    }
    cell.split(';').map(|c| parse_cell(c, what, line)).collect()
}

/// Reads a file written by [`write_classification_csv`]; the leg comes from
/// the column names.
pub fn read_classification_csv(path: impl AsRef<Path>) -> Result<(Leg, Vec<ClassificationRow>)> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    let header = r.headers().map_err(|e| Error::Results(e.to_string()))?.clone();
    let leg_name = header
        .get(3)
        .and_then(|h| h.strip_suffix("_top1"))
        .ok_or_else(|| Error::Results(format!("{}: not a classification results file", path.display())))?;
    let leg: Leg = leg_name.parse()?;
    if header.iter().collect::<Vec<_>>() != classification_header(leg) {
        return Err(Error::Results(format!("{}: unexpected columns", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Results(e.to_string()))?;
        let cell = |j: usize| rec.get(j).unwrap_or("");
        let gt: i64 = parse_cell(cell(2), "gt_label", line)?;
        let mut top = [0i64; TOP_K];
        let mut prob = [0f32; TOP_K];
        for k in 0..TOP_K {
            top[k] = parse_cell(cell(3 + k), "class", line)?;
            prob[k] = parse_cell(cell(3 + TOP_K + k), "probability", line)?;
        }
        let base = 3 + 2 * TOP_K;
        let layer: Vec<i64> = split_cell(cell(base), "fault_layer", line)?;
        let channel: Vec<i64> = split_cell(cell(base + 1), "fault_channel", line)?;
        let height: Vec<i64> = split_cell(cell(base + 2), "fault_height", line)?;
        let width: Vec<i64> = split_cell(cell(base + 3), "fault_width", line)?;
        let bit: Vec<i64> = split_cell(cell(base + 4), "fault_bit", line)?;
        let dir: Vec<u8> = split_cell(cell(base + 5), "flip_dir", line)?;
        let n = layer.len();
        if [channel.len(), height.len(), width.len(), bit.len(), dir.len()].iter().any(|&m| m != n) {
            return Err(Error::Results(format!("line {line}: fault columns disagree in length")));
        }
        let faults = (0..n)
            .map(|j| {
                Ok(FaultLoc {
                    layer: layer[j],
                    channel: channel[j],
                    height: height[j],
                    width: width[j],
                    bit: u8::try_from(bit[j]).ok(),
                    direction: FlipDirection::from_code(dir[j])
                        .ok_or_else(|| Error::Results(format!("line {line}: bad flip_dir {}", dir[j])))?,
                })
            })
            .collect::<Result<_>>()?;
        let flag = |j: usize, what: &str| -> Result<bool> { Ok(parse_cell::<u8>(cell(j), what, line)? != 0) };
        rows.push(ClassificationRow {
            leg,
            image_id: parse_cell(cell(0), "image_id", line)?,
            epoch: parse_cell(cell(1), "epoch", line)?,
            gt_label: usize::try_from(gt).ok(),
            top,
            prob,
            faults,
            nan: flag(base + 6, "nan")?,
            inf: flag(base + 7, "inf")?,
        });
    }
    Ok((leg, rows))
}

// Detection JSON -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResults {
    pub leg: Leg,
    pub images: Vec<DetectionRow>,
}

pub fn detection_json_bytes(leg: Leg, rows: &[DetectionRow]) -> Result<Vec<u8>> {
    let doc = DetectionResults {
        leg,
        images: rows.to_vec(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Results(e.to_string()))?;
    Ok((text + "\n").into_bytes())
}

pub fn write_detection_json(leg: Leg, rows: &[DetectionRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, detection_json_bytes(leg, rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_detection_json(path: impl AsRef<Path>) -> Result<DetectionResults> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Results(format!("{}: {e}", path.display())))
}

// KPIs ---------------------------------------------------------------------

/// Injection and outcome counts for one bit or layer. Counted per applied
/// fault: an image carrying two faults contributes to both entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KpiCounts {
    pub injections: u64,
    pub sde: u64,
    pub due: u64,
}

impl KpiCounts {
    pub fn sde_rate(&self) -> f64 {
        ratio(self.sde, self.injections)
    }

    pub fn due_rate(&self) -> f64 {
        ratio(self.due, self.injections)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub total: u64,
    pub corrupted: u64,
    pub due: u64,
    pub sde_rate: f64,
    pub due_rate: f64,
    pub per_bit: BTreeMap<u8, KpiCounts>,
    pub per_layer: BTreeMap<i64, KpiCounts>,
}

/// Accumulates per-image outcomes in a fixed order.
#[derive(Default)]
struct Tally {
    report: KpiReport,
}

impl Tally {
    fn add(&mut self, faults: &[FaultLoc], sde: bool, due: bool) {
        let r = &mut self.report;
        r.total += 1;
        r.corrupted += u64::from(sde);
        r.due += u64::from(due);
        for f in faults {
            let bump = |c: &mut KpiCounts| {
                c.injections += 1;
                c.sde += u64::from(sde);
                c.due += u64::from(due);
            };
            if let Some(bit) = f.bit {
                bump(r.per_bit.entry(bit).or_default());
            }
            bump(r.per_layer.entry(f.layer).or_default());
        }
    }

    fn finish(mut self) -> KpiReport {
        let r = &mut self.report;
        r.sde_rate = ratio(r.corrupted, r.total);
        r.due_rate = ratio(r.due, r.total);
        self.report
    }
}

fn pair_up<'a, T, K: Ord + Copy + fmt::Debug>(
    orig: &'a [T],
    corr: &'a [T],
    key: impl Fn(&T) -> K,
) -> Result<Vec<(&'a T, &'a T)>> {
    let index: BTreeMap<K, &T> = orig.iter().map(|r| (key(r), r)).collect();
    if index.len() != orig.len() {
        return Err(Error::Results("duplicate image in fault-free rows".into()));
    }
    let corr_keys: BTreeSet<K> = corr.iter().map(&key).collect();
    if corr_keys.len() != corr.len() || corr_keys.len() != index.len() || !corr_keys.iter().all(|k| index.contains_key(k)) {
        return Err(Error::Results("fault-free and faulty legs cover different images".into()));
    }
    Ok(corr.iter().map(|c| (index[&key(c)], c)).collect())
}

/// Image-wise SDE/DUE of a faulty leg against the fault-free leg.
pub fn sde_due_classification(orig: &[ClassificationRow], corr: &[ClassificationRow]) -> Result<KpiReport> {
    let mut tally = Tally::default();
    for (o, c) in pair_up(orig, corr, ClassificationRow::key)? {
        let due = c.nan || c.inf;
        let sde = !due && c.top[0] != o.top[0];
        tally.add(&c.faults, sde, due);
    }
    Ok(tally.finish())
}

/// Intersection over union of `(x1, y1, x2, y2)` boxes; boxes with zero or
/// non-finite area give 0.
pub fn iou(a: [f32; 4], b: [f32; 4]) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.map(f64::from);
    let [bx1, by1, bx2, by2] = b.map(f64::from);
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    if !(area_a > 0.0 && area_b > 0.0 && area_a.is_finite() && area_b.is_finite()) {
        return 0.0;
    }
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (area_a + area_b - inter)
}

/// Greedy one-to-one matching: candidate pairs by descending IoU (ties by
/// original index, then faulty index), each box used at most once.
/// Returns `(orig index, corr index, iou)`.
pub fn match_boxes(orig: &[Detection], corr: &[Detection]) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(orig.len() * corr.len());
    for (i, o) in orig.iter().enumerate() {
        for (j, c) in corr.iter().enumerate() {
            pairs.push((i, j, iou(o.bbox, c.bbox)));
        }
    }
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut used_o = vec![false; orig.len()];
    let mut used_c = vec![false; corr.len()];
    let mut out = Vec::new();
    for (i, j, v) in pairs {
        if !used_o[i] && !used_c[j] {
            used_o[i] = true;
            used_c[j] = true;
            out.push((i, j, v));
        }
    }
    out
}

/// True if the confident detections changed materially: a missed or
/// spurious box, a class change, or a matched pair below `iou_thresh`.
pub fn image_corrupted(orig: &[Detection], corr: &[Detection], iou_thresh: f64, conf_thresh: f32) -> bool {
    let keep = |d: &[Detection]| d.iter().copied().filter(|x| x.score >= conf_thresh).collect::<Vec<_>>();
    let (o, c) = (keep(orig), keep(corr));
    if o.len() != c.len() {
        return true;
    }
    let matched = match_boxes(&o, &c);
    matched.len() != o.len() || matched.iter().any(|&(i, j, v)| o[i].class != c[j].class || v < iou_thresh)
}

pub const DEFAULT_IOU_THRESH: f64 = 0.5;
pub const DEFAULT_CONF_THRESH: f32 = 0.25;

pub fn sde_due_detection(orig: &[DetectionRow], corr: &[DetectionRow], iou_thresh: f64, conf_thresh: f32) -> Result<KpiReport> {
    let mut tally = Tally::default();
    for (o, c) in pair_up(orig, corr, DetectionRow::key)? {
        let due = c.nan || c.inf;
        let sde = !due && image_corrupted(&o.detections, &c.detections, iou_thresh, conf_thresh);
        tally.add(&c.faults, sde, due);
    }
    Ok(tally.finish())
}

// Reports ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format `{other}` (csv or json)"))),
        }
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Results(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Results(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    let got = r.headers().map_err(|e| Error::Results(e.to_string()))?;
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::Results(format!("{}: unexpected columns", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Results(e.to_string()))?;
            Ok(rec.iter().map(str::to_owned).collect())
        })
        .collect()
}

const SUMMARY_HEADER: [&str; 5] = ["total", "corrupted", "due", "sde_rate", "due_rate"];
const BIT_HEADER: [&str; 6] = ["bit", "injections", "sde", "due", "sde_rate", "due_rate"];
const LAYER_HEADER: [&str; 6] = ["layer", "injections", "sde", "due", "sde_rate", "due_rate"];

fn table_rows<K: fmt::Display>(map: &BTreeMap<K, KpiCounts>) -> Vec<Vec<String>> {
    map.iter()
        .map(|(k, c)| {
            vec![
                k.to_string(),
                c.injections.to_string(),
                c.sde.to_string(),
                c.due.to_string(),
                c.sde_rate().to_string(),
                c.due_rate().to_string(),
            ]
        })
        .collect()
}

fn parse_table<K: FromStr + Ord>(rows: Vec<Vec<String>>) -> Result<BTreeMap<K, KpiCounts>> {
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let line = i + 2;
            Ok((
                parse_cell(&r[0], "key", line)?,
                KpiCounts {
                    injections: parse_cell(&r[1], "injections", line)?,
                    sde: parse_cell(&r[2], "sde", line)?,
                    due: parse_cell(&r[3], "due", line)?,
                },
            ))
        })
        .collect()
}

/// Writes `<stem>.csv` plus the plot tables `<stem>_bits.csv` and
/// `<stem>_layers.csv`, or everything as `<stem>.json`. Returns the paths
/// written.
pub fn write_report(report: &KpiReport, dir: impl AsRef<Path>, stem: &str, format: ReportFormat) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    match format {
        ReportFormat::Json => {
            let path = dir.join(format!("{stem}.json"));
            let text = serde_json::to_string_pretty(report).map_err(|e| Error::Results(e.to_string()))?;
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            Ok(vec![path])
        }
        ReportFormat::Csv => {
            let summary = dir.join(format!("{stem}.csv"));
            let bits = dir.join(format!("{stem}_bits.csv"));
            let layers = dir.join(format!("{stem}_layers.csv"));
            let row = vec![
                report.total.to_string(),
                report.corrupted.to_string(),
                report.due.to_string(),
                report.sde_rate.to_string(),
                report.due_rate.to_string(),
            ];
            write_csv(&summary, &SUMMARY_HEADER, vec![row])?;
            write_csv(&bits, &BIT_HEADER, table_rows(&report.per_bit))?;
            write_csv(&layers, &LAYER_HEADER, table_rows(&report.per_layer))?;
            Ok(vec![summary, bits, layers])
        }
    }
}

pub fn read_report(dir: impl AsRef<Path>, stem: &str, format: ReportFormat) -> Result<KpiReport> {
    let dir = dir.as_ref();
    match format {
        ReportFormat::Json => {
            let path = dir.join(format!("{stem}.json"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Results(format!("{}: {e}", path.display())))
        }
        ReportFormat::Csv => {
            let summary = read_csv(&dir.join(format!("{stem}.csv")), &SUMMARY_HEADER)?;
            let [s] = summary.as_slice() else {
                return Err(Error::Results(format!("{stem}.csv must hold one row")));
            };
            Ok(KpiReport {
                total: parse_cell(&s[0], "total", 2)?,
                corrupted: parse_cell(&s[1], "corrupted", 2)?,
                due: parse_cell(&s[2], "due", 2)?,
                sde_rate: parse_cell(&s[3], "sde_rate", 2)?,
                due_rate: parse_cell(&s[4], "due_rate", 2)?,
                per_bit: parse_table(read_csv(&dir.join(format!("{stem}_bits.csv")), &BIT_HEADER)?)?,
                per_layer: parse_table(read_csv(&dir.join(format!("{stem}_layers.csv")), &LAYER_HEADER)?)?,
            })
        }
    }
}

/// KPIs of the faulty and (if present) hardened legs of a results
/// directory holding `orig`, `corr` and optionally `resil` files.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub corr: KpiReport,
    pub resil: Option<KpiReport>,
}

pub fn evaluate_results(dir: impl AsRef<Path>) -> Result<Evaluation> {
    let dir = dir.as_ref();
    let file = |leg: Leg, ext: &str| dir.join(format!("{leg}.{ext}"));
    if file(Leg::Orig, "csv").exists() {
        let load = |leg: Leg| -> Result<Vec<ClassificationRow>> {
            let (found, rows) = read_classification_csv(file(leg, "csv"))?;
            if found != leg {
                return Err(Error::Results(format!("{leg}.csv holds {found} rows")));
            }
            Ok(rows)
        };
        let orig = load(Leg::Orig)?;
        let corr = sde_due_classification(&orig, &load(Leg::Corr)?)?;
        let resil = if file(Leg::Resil, "csv").exists() {
            Some(sde_due_classification(&orig, &load(Leg::Resil)?)?)
        } else {
            None
        };
        Ok(Evaluation { corr, resil })
    } else if file(Leg::Orig, "json").exists() {
        let load = |leg: Leg| -> Result<Vec<DetectionRow>> {
            let doc = read_detection_json(file(leg, "json"))?;
            if doc.leg != leg {
                return Err(Error::Results(format!("{leg}.json holds {} rows", doc.leg)));
            }
            Ok(doc.images)
        };
        let orig = load(Leg::Orig)?;
        let eval = |rows: &[DetectionRow]| sde_due_detection(&orig, rows, DEFAULT_IOU_THRESH, DEFAULT_CONF_THRESH);
        let corr = eval(&load(Leg::Corr)?)?;
        let resil = if file(Leg::Resil, "json").exists() {
            Some(eval(&load(Leg::Resil)?)?)
        } else {
            None
        };
        Ok(Evaluation { corr, resil })
    } else {
        Err(Error::Results(format!("{}: no orig.csv or orig.json", dir.display())))
    }
}
