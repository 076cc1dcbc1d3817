use std::collections::BTreeMap;

use faultforge::evaluation::{
    image_corrupted, iou, read_classification_csv, sde_due_classification, sde_due_detection, write_classification_csv,
    ClassificationRow, DetectionRow, FaultLoc, KpiCounts, Leg, DEFAULT_CONF_THRESH, DEFAULT_IOU_THRESH,
};
use faultforge::injector::FlipDirection;
use faultforge::model::Detection;
use proptest::prelude::*;

/// Exact fraction with a positive denominator, kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Frac(i128, i128);

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Frac {
    fn new(n: i128, d: i128) -> Frac {
        assert!(d != 0);
        let g = gcd(n, d).max(1) * d.signum();
        Frac(n / g, d / g)
    }
    fn add(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn mul(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.0, self.1 * o.1)
    }
}

/// Injection-weighted mean of per-key SDE rates, in exact arithmetic.
fn recompose<K>(table: &BTreeMap<K, KpiCounts>) -> Frac {
    let total: u64 = table.values().map(|c| c.injections).sum();
    table.values().fold(Frac(0, 1), |acc, c| {
        let weight = Frac::new(c.injections as i128, total as i128);
        acc.add(weight.mul(Frac::new(c.sde as i128, c.injections as i128)))
    })
}

struct Case {
    orig_top1: usize,
    corr_top1: usize,
    nan: bool,
    bit: u8,
    layer: i64,
}

const fn case(orig_top1: usize, corr_top1: usize, nan: bool, bit: u8, layer: i64) -> Case {
    Case {
        orig_top1,
        corr_top1,
        nan,
        bit,
        layer,
    }
}

// Two NaN-flagged images (one of them with a changed top-1 as well) and
// three changed top-1 classes among the remaining eight.
const FIXTURE: [Case; 10] = [
    case(3, 3, false, 0, 0),
    case(1, 7, false, 30, 2),
    case(5, 1, true, 30, 1),
    case(2, 2, false, 23, 0),
    case(8, 4, false, 30, 1),
    case(0, 0, true, 29, 2),
    case(6, 6, false, 0, 1),
    case(9, 2, false, 22, 0),
    case(4, 4, false, 31, 2),
    case(7, 7, false, 5, 0),
];

fn logits_peaking_at(class: usize, nan: bool) -> Vec<f32> {
    let mut v: Vec<f32> = (0..10).map(|i| i as f32 * 0.01).collect();
    v[class] = 5.0;
    if nan {
        v[(class + 1) % 10] = f32::NAN;
    }
    v
}

fn fault(layer: i64, bit: u8) -> FaultLoc {
    FaultLoc {
        layer,
        channel: 0,
        height: 0,
        width: 0,
        bit: Some(bit),
        direction: FlipDirection::ZeroToOne,
    }
}

fn fixture_rows(cases: &[Case]) -> (Vec<ClassificationRow>, Vec<ClassificationRow>) {
    let mut orig = Vec::new();
    let mut corr = Vec::new();
    for (id, c) in cases.iter().enumerate() {
        let id = id as u64;
        orig.push(ClassificationRow::from_logits(Leg::Orig, id, 0, None, &logits_peaking_at(c.orig_top1, false)));
        let mut row = ClassificationRow::from_logits(Leg::Corr, id, 0, None, &logits_peaking_at(c.corr_top1, c.nan));
        row.faults.push(fault(c.layer, c.bit));
        corr.push(row);
    }
    (orig, corr)
}

#[test]
fn ten_image_fixture_matches_hand_enumeration() {
    let due = FIXTURE.iter().filter(|c| c.nan).count() as u64;
    let sde = FIXTURE.iter().filter(|c| !c.nan && c.orig_top1 != c.corr_top1).count() as u64;
    assert_eq!((sde, due), (3, 2));

    let (orig, corr) = fixture_rows(&FIXTURE);
    let r = sde_due_classification(&orig, &corr).unwrap();
    assert_eq!((r.total, r.corrupted, r.due), (10, sde, due));
    assert_eq!(r.sde_rate, 0.3);
    assert_eq!(r.due_rate, 0.2);

    let mut by_bit: BTreeMap<u8, KpiCounts> = BTreeMap::new();
    let mut by_layer: BTreeMap<i64, KpiCounts> = BTreeMap::new();
    for c in &FIXTURE {
        let is_sde = !c.nan && c.orig_top1 != c.corr_top1;
        for e in [by_bit.entry(c.bit).or_default(), by_layer.entry(c.layer).or_default()] {
            e.injections += 1;
            e.sde += u64::from(is_sde);
            e.due += u64::from(c.nan);
        }
    }
    assert_eq!(r.per_bit, by_bit);
    assert_eq!(r.per_layer, by_layer);
    assert_eq!(r.per_bit[&30], KpiCounts { injections: 3, sde: 2, due: 1 });
}

#[test]
fn per_bit_and_per_layer_rates_recompose_exactly() {
    let (orig, corr) = fixture_rows(&FIXTURE);
    let r = sde_due_classification(&orig, &corr).unwrap();
    let overall = Frac::new(r.corrupted as i128, r.total as i128);
    assert_eq!(overall, Frac(3, 10));
    assert_eq!(recompose(&r.per_bit), overall);
    assert_eq!(recompose(&r.per_layer), overall);
}

#[test]
fn fixture_survives_csv_round_trip() {
    let (orig, corr) = fixture_rows(&FIXTURE);
    let tmp = tempfile::tempdir().unwrap();
    let (po, pc) = (tmp.path().join("orig.csv"), tmp.path().join("corr.csv"));
    write_classification_csv(Leg::Orig, &orig, &po).unwrap();
    write_classification_csv(Leg::Corr, &corr, &pc).unwrap();
    let (lo, ro) = read_classification_csv(&po).unwrap();
    let (lc, rc) = read_classification_csv(&pc).unwrap();
    assert_eq!((lo, lc), (Leg::Orig, Leg::Corr));
    assert_eq!(
        sde_due_classification(&ro, &rc).unwrap(),
        sde_due_classification(&orig, &corr).unwrap()
    );
}

proptest! {
    #[test]
    fn recomposition_holds_for_uniform_fault_counts(
        outcomes in prop::collection::vec((0usize..10, 0usize..10, any::<bool>()), 1..40),
        faults in prop::collection::vec((0u8..32, 0i64..4), 1..4),
    ) {
        let per_image = faults.len();
        let mut orig = Vec::new();
        let mut corr = Vec::new();
        for (id, &(o, c, nan)) in outcomes.iter().enumerate() {
            orig.push(ClassificationRow::from_logits(Leg::Orig, id as u64, 0, None, &logits_peaking_at(o, false)));
            let mut row = ClassificationRow::from_logits(Leg::Corr, id as u64, 0, None, &logits_peaking_at(c, nan));
            for k in 0..per_image {
                let (bit, layer) = faults[(id + k) % per_image];
                row.faults.push(fault(layer, bit));
            }
            corr.push(row);
        }
        let r = sde_due_classification(&orig, &corr).unwrap();
        prop_assert!(r.corrupted + r.due <= r.total);
        prop_assert!(r.sde_rate + r.due_rate <= 1.0);
        let overall = Frac::new(r.corrupted as i128, r.total as i128);
        prop_assert_eq!(recompose(&r.per_bit), overall);
        prop_assert_eq!(recompose(&r.per_layer), overall);
    }
}

// Detection ----------------------------------------------------------------

fn det(class: usize, score: f32, bbox: [i32; 4]) -> Detection {
    Detection {
        class,
        score,
        bbox: bbox.map(|v| v as f32),
    }
}

fn det_row(image_id: u64, detections: Vec<Detection>) -> DetectionRow {
    DetectionRow {
        image_id,
        epoch: 0,
        detections,
        faults: Vec::new(),
        nan: false,
        inf: false,
    }
}

/// Intersection and union areas of integer boxes.
fn int_overlap(a: [i64; 4], b: [i64; 4]) -> (i64, i64) {
    let area = |r: [i64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = iw * ih;
    (inter, area(a) + area(b) - inter)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// An image is unchanged iff some one-to-one pairing of the confident boxes
/// keeps every class and reaches IoU >= 1/2 (checked as 2*inter >= union).
fn oracle_corrupted(orig: &[Detection], corr: &[Detection]) -> bool {
    let keep = |d: &[Detection]| -> Vec<(usize, [i64; 4])> {
        d.iter()
            .filter(|x| x.score >= DEFAULT_CONF_THRESH)
            .map(|x| (x.class, x.bbox.map(|v| v as i64)))
            .collect()
    };
    let (o, c) = (keep(orig), keep(corr));
    if o.len() != c.len() {
        return true;
    }
    !permutations(o.len()).iter().any(|perm| {
        perm.iter().enumerate().all(|(i, &j)| {
            let (inter, union) = int_overlap(o[i].1, c[j].1);
            o[i].0 == c[j].0 && union > 0 && 2 * inter >= union
        })
    })
}

fn shifted_box_fixture() -> (Vec<DetectionRow>, Vec<DetectionRow>) {
    let a = det(0, 0.9, [0, 0, 10, 10]);
    let b = det(1, 0.8, [20, 20, 30, 30]);
    let orig = vec![
        det_row(0, vec![a, b]),
        det_row(1, vec![det(2, 0.7, [5, 5, 15, 15])]),
        det_row(2, vec![det(1, 0.6, [0, 0, 8, 8]), det(2, 0.1, [40, 40, 50, 50])]),
        det_row(3, vec![]),
    ];
    let corr = vec![
        // same boxes, reported in the other order
        det_row(0, vec![b, a]),
        // shifted by 6 px: IoU 16/184
        det_row(1, vec![det(2, 0.7, [11, 11, 21, 21])]),
        // 1 px shift stays matched; the unconfident box is ignored
        det_row(2, vec![det(1, 0.6, [1, 0, 9, 8])]),
        det_row(3, vec![]),
    ];
    (orig, corr)
}

#[test]
fn shifted_box_fixture_gives_quarter_sde() {
    let (orig, corr) = shifted_box_fixture();
    let oracle: Vec<bool> = orig
        .iter()
        .zip(&corr)
        .map(|(o, c)| oracle_corrupted(&o.detections, &c.detections))
        .collect();
    assert_eq!(oracle, [false, true, false, false]);
    let r = sde_due_detection(&orig, &corr, DEFAULT_IOU_THRESH, DEFAULT_CONF_THRESH).unwrap();
    assert_eq!((r.total, r.corrupted, r.due), (4, 1, 0));
    assert_eq!(r.sde_rate, 0.25);
    assert_eq!(int_overlap([5, 5, 15, 15], [11, 11, 21, 21]), (16, 184));
}

#[test]
fn iou_of_offset_squares_is_one_seventh() {
    assert_eq!(int_overlap([0, 0, 2, 2], [1, 1, 3, 3]), (1, 7));
    assert_eq!(iou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]), 1.0 / 7.0);
}

#[test]
fn nan_flagged_detection_image_is_due_not_sde() {
    let (orig, mut corr) = shifted_box_fixture();
    corr[1].nan = true;
    let r = sde_due_detection(&orig, &corr, DEFAULT_IOU_THRESH, DEFAULT_CONF_THRESH).unwrap();
    assert_eq!((r.corrupted, r.due), (0, 1));
}

/// Boxes confined to separate 20 px cells, each possibly jittered,
/// relabelled, dropped or joined by a spurious box in the faulty leg.
fn grid_image() -> impl Strategy<Value = (Vec<Detection>, Vec<Detection>)> {
    prop::collection::vec(
        (0usize..3, 0.0f32..1.0, 2i32..9, -4i32..5, -4i32..5, 0u8..10),
        0..5,
    )
    .prop_map(|cells| {
        let mut orig = Vec::new();
        let mut corr = Vec::new();
        for (k, &(class, score, size, dx, dy, action)) in cells.iter().enumerate() {
            let base = 20 * k as i32 + 5;
            let o = det(class, score, [base, 5, base + size, 5 + size]);
            match action {
                0 => {}
                1 => corr.push(Detection { class: (class + 1) % 3, ..o }),
                2 => {
                    corr.push(o);
                    corr.push(det(class, score, [base + 4, 9, base + 8, 13]));
                }
                _ => corr.push(det(class, score, [base + dx, 5 + dy, base + dx + size, 5 + dy + size])),
            }
            orig.push(o);
        }
        corr.reverse();
        (orig, corr)
    })
}

proptest! {
    #[test]
    fn greedy_matching_agrees_with_exhaustive_oracle((orig, corr) in grid_image()) {
        prop_assert_eq!(
            image_corrupted(&orig, &corr, DEFAULT_IOU_THRESH, DEFAULT_CONF_THRESH),
            oracle_corrupted(&orig, &corr)
        );
        prop_assert!(!image_corrupted(&orig, &orig, DEFAULT_IOU_THRESH, DEFAULT_CONF_THRESH));
    }
}
