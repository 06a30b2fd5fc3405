//! Built-in verification suites: the scalar contrastive oracle against the
//! vectorized loss, EMA exactness, mixing composition audits, memory-bank
//! FIFO behavior, and mIoU arithmetic. Each suite prints one pass/fail line.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{load_config_unvalidated, CliError, CommonArgs};
use crate::contrastive::{
    self, oracle, AnchorPlan, BankNegatives, ContrastiveBatchPlan, Negative, NegativeSource,
    PlanConstruction, RegionIndex,
};
use crate::core::{streams, EmbeddingGrid, ImageTensor, LabelMap, RngHandle, IGNORE};
use crate::eval::{miou, ConfusionMatrix};
use crate::membank::{BankEntry, MemoryBank};
use crate::mixing::{
    apply_classmix, apply_cutmix, sample_classmix_spec, sample_cutmix_spec, CutMixRanges, Sample,
};
use crate::models::{ema_update, EmaState, Parameterized};

const ORACLE_CASES: usize = 120;

type SuiteResult = Result<String, String>;

fn normalized_grid(h: usize, w: usize, k: usize, rng: &mut ChaCha12Rng) -> EmbeddingGrid {
    let mut data = Array3::from_shape_fn((h, w, k), |_| rng.gen_range(-1.0..1.0));
    for y in 0..h {
        for x in 0..w {
            let norm = data
                .slice(ndarray::s![y, x, ..])
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            data.slice_mut(ndarray::s![y, x, ..])
                .mapv_inplace(|v| v / norm);
        }
    }
    EmbeddingGrid::new(data, true)
}

fn random_case(
    rng: &mut ChaCha12Rng,
) -> (ContrastiveBatchPlan, EmbeddingGrid, EmbeddingGrid, BankNegatives) {
    let h = rng.gen_range(2..=8);
    let w = rng.gen_range(2..=8);
    let k = rng.gen_range(3..=16);
    let e_t = normalized_grid(h, w, k, rng);
    let e_cut = normalized_grid(h, w, k, rng);
    let with_bank = rng.gen_bool(0.5);
    let mut bank = BankNegatives::default();
    if with_bank {
        for _ in 0..rng.gen_range(1..20) {
            let mut v = Array1::from_shape_fn(k, |_| rng.gen_range(-1.0..1.0));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.mapv_inplace(|x| x / norm);
            bank.embeddings.push(v);
            bank.categories.push(rng.gen_range(0..5));
        }
    }
    let mut anchors = Vec::new();
    for row in 0..h {
        for col in 0..w {
            if rng.gen_bool(0.6) {
                continue;
            }
            let mut negatives = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    if (r, c) == (row, col) {
                        continue;
                    }
                    if rng.gen_bool(0.5) {
                        negatives.push(Negative {
                            source: NegativeSource::TeacherTarget(RegionIndex { row: r, col: c }),
                            category: rng.gen_range(0..5),
                        });
                    }
                    if rng.gen_bool(0.5) {
                        negatives.push(Negative {
                            source: NegativeSource::StudentCut(RegionIndex { row: r, col: c }),
                            category: rng.gen_range(0..5),
                        });
                    }
                }
            }
            for slot in 0..bank.len() {
                if rng.gen_bool(0.5) {
                    negatives.push(Negative {
                        source: NegativeSource::Bank(slot),
                        category: bank.categories[slot],
                    });
                }
            }
            anchors.push(AnchorPlan {
                anchor: RegionIndex { row, col },
                category: rng.gen_range(0..5),
                positives: vec![RegionIndex { row, col }],
                negatives,
            });
        }
    }
    (
        ContrastiveBatchPlan {
            anchors,
            grid_h: h,
            grid_w: w,
            bank_len: bank.len(),
            construction: PlanConstruction::default(),
        },
        e_t,
        e_cut,
        bank,
    )
}

/// Vectorized loss against the literal scalar oracle on randomized cases.
fn suite_oracle(temperature: f64) -> SuiteResult {
    if !(temperature > 0.0) {
        return Err(format!(
            "precondition violated: temperature must be > 0, got {temperature}"
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(0xC0FFEE);
    for case in 0..ORACLE_CASES {
        let (plan, e_t, e_cut, bank) = random_case(&mut rng);
        let fast = contrastive::rwc_loss(&plan, &e_t, &e_cut, &bank, temperature)
            .map_err(|e| format!("case {case}: {e}"))?;
        let reference = oracle::rwc_loss_reference(&plan, &e_t, &e_cut, &bank, temperature);
        let denom = reference.abs().max(1e-12);
        if ((fast.value - reference) / denom).abs() > 1e-6 {
            return Err(format!(
                "case {case}: vectorized {} vs oracle {reference}",
                fast.value
            ));
        }
    }
    Ok(format!("{ORACLE_CASES} randomized grids within 1e-6"))
}

struct Scalar(ndarray::ArrayD<f64>);
impl Parameterized for Scalar {
    fn param_names(&self) -> Vec<String> {
        vec!["probe".into()]
    }
    fn params(&self) -> Vec<ndarray::ArrayViewD<'_, f64>> {
        vec![self.0.view()]
    }
    fn params_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, f64>> {
        vec![self.0.view_mut()]
    }
}

fn suite_ema() -> SuiteResult {
    let scalar = |v: f64| Scalar(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), v));
    // degenerate decays
    for (alpha, start, current, expect) in
        [(0.0, 1.0, 0.25, 0.25), (1.0, 1.0, 0.25, 1.0), (0.999, 1.0, 0.0, 0.999)]
    {
        let mut state = EmaState::new(alpha).map_err(|e| e.to_string())?;
        let mut shadow = scalar(start);
        ema_update(&mut state, &mut shadow, &scalar(current)).map_err(|e| e.to_string())?;
        if (shadow.0.sum() - expect).abs() > 1e-10 {
            return Err(format!(
                "alpha={alpha}: shadow {} expected {expect}",
                shadow.0.sum()
            ));
        }
    }
    // geometric convergence
    let mut state = EmaState::new(0.9).map_err(|e| e.to_string())?;
    let mut shadow = scalar(1.0);
    let target = scalar(0.0);
    let mut expected = 1.0;
    for step in 0..100 {
        ema_update(&mut state, &mut shadow, &target).map_err(|e| e.to_string())?;
        expected *= 0.9;
        if (shadow.0.sum() - expected).abs() > 1e-10 {
            return Err(format!("geometric drift at step {step}"));
        }
    }
    Ok("degenerate decays exact, geometric convergence to 1e-10".into())
}

fn suite_mixing() -> SuiteResult {
    let base = RngHandle::new(0xA11CE);
    let (h, w, stride) = (64, 64, 8);
    let mut audited = 0usize;
    for i in 0..200u64 {
        let geometry = base.substream(streams::DATA_GEOMETRY, i);
        let mut rng = geometry.rng();
        let source = Sample::new(
            ImageTensor::new(Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0)))
                .expect("dims"),
            LabelMap::new(ndarray::Array2::from_shape_fn((h, w), |_| rng.gen_range(0..5))),
        )
        .expect("dims");
        let target = Sample::new(
            ImageTensor::new(Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0)))
                .expect("dims"),
            LabelMap::new(ndarray::Array2::from_shape_fn((h, w), |_| rng.gen_range(0..5))),
        )
        .expect("dims");

        let spec = sample_cutmix_spec(
            &base.substream(streams::CUTMIX_RECT, i),
            h,
            w,
            stride,
            &CutMixRanges::default(),
        )
        .map_err(|e| e.to_string())?;
        let mixed = apply_cutmix(&source, &target, &spec).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let inside = spec.rect.contains(y, x);
                if mixed.mask[[y, x]] != inside as u8 {
                    return Err(format!("case {i}: mask mismatch at ({y}, {x})"));
                }
                let want = if inside { &target } else { &source };
                if mixed.label.data[[y, x]] != want.label.data[[y, x]]
                    || (0..3).any(|c| mixed.image.data[[y, x, c]] != want.image.data[[y, x, c]])
                {
                    return Err(format!("case {i}: cutmix composition leak at ({y}, {x})"));
                }
            }
        }

        let cm_spec = sample_classmix_spec(&base.substream(streams::CLASSMIX_SELECT, i), &source.label)
            .map_err(|e| e.to_string())?;
        let cm = apply_classmix(&source, &target.image, &target.label, &cm_spec)
            .map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let from_source = cm_spec.classes.contains(&source.label.data[[y, x]]);
                if cm.mask[[y, x]] != from_source as u8 {
                    return Err(format!("case {i}: classmix mask mismatch at ({y}, {x})"));
                }
                let (want_img, want_lab) = if from_source {
                    (&source.image, &source.label)
                } else {
                    (&target.image, &target.label)
                };
                if cm.label.data[[y, x]] != want_lab.data[[y, x]]
                    || (0..3).any(|c| cm.image.data[[y, x, c]] != want_img.data[[y, x, c]])
                {
                    return Err(format!("case {i}: classmix composition leak at ({y}, {x})"));
                }
            }
        }
        audited += 2;
    }
    Ok(format!("{audited} composition audits bit-exact"))
}

fn suite_membank() -> SuiteResult {
    let rng = RngHandle::new(3);
    let entry = |cat: u8| BankEntry {
        embedding: Array1::from_vec(vec![1.0, 0.0]),
        category: cat,
        stamp: 0,
    };
    let mut bank = MemoryBank::new(3, 16);
    for stamp in 0..10u64 {
        bank.push_batch(
            vec![entry((stamp % 5) as u8); 4],
            stamp,
            &rng.substream(streams::BANK_SUBSAMPLE, stamp),
        )
        .map_err(|e| e.to_string())?;
        let expect_slabs = (stamp + 1).min(3);
        if bank.stamps().len() as u64 != expect_slabs {
            return Err(format!("slab count wrong after stamp {stamp}"));
        }
    }
    if bank.stamps() != vec![7, 8, 9] {
        return Err(format!("window not FIFO: {:?}", bank.stamps()));
    }
    let mut disabled = MemoryBank::new(0, 16);
    disabled
        .push_batch(vec![entry(0); 8], 0, &rng)
        .map_err(|e| e.to_string())?;
    if !disabled.is_empty() {
        return Err("depth-0 bank retained entries".into());
    }
    let mut filt = MemoryBank::new(1, 8);
    filt.push_batch(
        vec![entry(1), entry(1), entry(2), entry(3)],
        0,
        &rng.substream(streams::BANK_SUBSAMPLE, 100),
    )
    .map_err(|e| e.to_string())?;
    if filt.snapshot_negatives(1, true).len() != 2 || filt.snapshot_negatives(1, false).len() != 4 {
        return Err("category filter count wrong".into());
    }
    Ok("FIFO window, depth-0, and category filter verified".into())
}

fn suite_miou() -> SuiteResult {
    // hand case: truth [0,0,1,1], prediction [0,1,1,1]
    let truth = LabelMap::new(ndarray::array![[0u8, 0], [1, 1]]);
    let pred = LabelMap::new(ndarray::array![[0u8, 1], [1, 1]]);
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &truth).map_err(|e| e.to_string())?;
    let (per_class, mean) = miou(&cm, None).map_err(|e| e.to_string())?;
    let expect = [0.5, 2.0 / 3.0];
    for (k, e) in expect.iter().enumerate() {
        if (per_class[k].unwrap() - e).abs() > 1e-12 {
            return Err(format!("class {k} IoU {:?} != {e}", per_class[k]));
        }
    }
    if (mean - (expect[0] + expect[1]) / 2.0).abs() > 1e-12 {
        return Err(format!("mean {mean}"));
    }
    let (_, sub) = miou(&cm, Some(&[1])).map_err(|e| e.to_string())?;
    if (sub - 2.0 / 3.0).abs() > 1e-12 {
        return Err(format!("subset mean {sub}"));
    }
    // IGNORE exclusion
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &LabelMap::filled(2, 2, IGNORE))
        .map_err(|e| e.to_string())?;
    if cm.total() != 0 {
        return Err("IGNORE pixels were counted".into());
    }
    Ok("hand-computed matrices, subset means, IGNORE exclusion exact".into())
}

/// `rccr selftest`: runs every suite, prints one line each, and fails with
/// exit code 3 if any suite fails.
pub fn cmd_selftest(common: &CommonArgs) -> Result<(), CliError> {
    let (cfg, _) = load_config_unvalidated(common)?;
    let temperature = cfg.train.contrastive.temperature;
    let suites: Vec<(&str, SuiteResult)> = vec![
        ("eq1-oracle", suite_oracle(temperature)),
        ("ema", suite_ema()),
        ("mixing", suite_mixing()),
        ("membank", suite_membank()),
        ("miou", suite_miou()),
    ];
    let mut failures = Vec::new();
    for (name, result) in &suites {
        match result {
            Ok(detail) => println!("suite {name}: PASS ({detail})"),
            Err(message) => {
                println!("suite {name}: FAIL ({message})");
                failures.push(format!("{name}: {message}"));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Selftest(failures.join("; ")))
    }
}
