use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use quantlab_core::corruptions::{corrupt_dataset, CorruptionKind};
use quantlab_core::costmodel;
use quantlab_core::desk::{desk_dataset, desk_model, DeskImages};
use quantlab_core::nn::format::{load_qds, load_qmod, save_qds, save_qmod};
use quantlab_core::nn::{calibrate_and_evaluate, evaluate, evaluate_float, Dataset, EvalReport, ModelGraph, QuantizedModel};
use quantlab_core::schemes::{calibrate as calibrate_model, CalibrationRecord, ProbConfig, Scheme, SchemeKind};
use quantlab_core::surrogate::StrideConfig;
use quantlab_core::Granularity;

use crate::{CalibrateArgs, CompareArgs, CorruptArgs, CostArgs, EvalArgs, MakeDeskArgs, ProbArgs, QuantArgs, SweepArgs};

pub const GAMMAS: [f64; 5] = [1.0, 4.0, 8.0, 16.0, 32.0];
pub const CALIBRATION_SIZES: [usize; 6] = [16, 32, 64, 128, 256, 512];
pub const REPEATS: u64 = 3;

fn model(path: &Path) -> Result<ModelGraph> {
    load_qmod(path).with_context(|| format!("reading model {}", path.display()))
}

fn dataset(path: &Path) -> Result<Dataset> {
    load_qds(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn kind(scheme: Scheme, granularity: Granularity, q: &QuantArgs) -> Result<SchemeKind> {
    Ok(SchemeKind::new(scheme, granularity, q.bits, q.cast_bits)?)
}

fn prob_config(p: &ProbArgs) -> Result<ProbConfig> {
    Ok(ProbConfig { gamma: StrideConfig::new(p.gamma)?, coverage: p.coverage, ..ProbConfig::default() })
}

/// The out-of-domain protocol: one sampled corruption per image.
fn maybe_corrupt(data: Dataset, corrupt: bool, seed: u64) -> Result<Dataset> {
    if corrupt {
        Ok(corrupt_dataset(&data, &CorruptionKind::ALL, seed)?)
    } else {
        Ok(data)
    }
}

fn calibration_subset(data: &Dataset, samples: usize) -> Result<Dataset> {
    if data.is_empty() || samples == 0 {
        bail!("calibration needs at least one sample");
    }
    if samples > data.len() {
        log::warn!("{samples} calibration samples requested, {} available", data.len());
    }
    Ok(data.take(samples))
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let scheme = Scheme::from(a.scheme);
    if !scheme.needs_calibration() {
        bail!("the dynamic scheme takes no calibration");
    }
    let m = model(&a.model)?;
    let data = dataset(&a.data)?;
    let data = calibration_subset(&data, a.samples.unwrap_or(data.len()))?;
    let k = kind(scheme, a.granularity.into(), &a.quant)?;
    let p = prob_config(&a.prob)?;
    let record = calibrate_model(&m, &data, &k, (scheme == Scheme::Probabilistic).then_some(&p))?;

    let mut summary = format!("calibrated {} ({}) on {} samples\n", scheme.name(), k.granularity.short(), data.len());
    for l in &record.per_layer {
        let _ = write!(summary, "layer {:>2}: m {:.6} M {:.6} s {:.6e} z {}", l.layer_index, l.m[0], l.max[0], l.s[0], l.z[0]);
        if l.s.len() > 1 {
            let _ = write!(summary, " (+{} channels)", l.s.len() - 1);
        }
        if let (Some(al), Some(be)) = (l.alpha, l.beta) {
            let _ = write!(summary, " alpha {al} beta {be} coverage {:.5}", l.calibration_coverage.unwrap_or(f64::NAN));
        }
        summary.push('\n');
    }
    write(&a.out, &record.to_json()?)?;
    print!("{summary}");
    Ok(())
}

fn report_text(header: &str, r: &EvalReport) -> String {
    let mut s = format!("{header}\nsamples {}\ntop1_accuracy {:.4}\n", r.samples, r.top1_accuracy);
    s.push_str("layer kind     mse           peak_widened  mean_coverage\n");
    for l in &r.per_layer {
        let cov = l.mean_coverage.map_or("-".to_string(), |c| format!("{c:.5}"));
        let _ = writeln!(s, "{:>5} {:<8} {:<13.6e} {:<13} {cov}", l.layer_index, l.kind, l.mse, l.peak_widened);
    }
    s
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let scheme = Scheme::from(a.scheme);
    let m = model(&a.model)?;
    let data = maybe_corrupt(dataset(&a.data)?, a.corrupt, a.seed)?;
    let k = kind(scheme, a.granularity.into(), &a.quant)?;
    let record = match (&a.calibration, scheme.needs_calibration()) {
        (Some(p), true) => Some(CalibrationRecord::load(p).with_context(|| format!("reading {}", p.display()))?),
        (None, true) => bail!("the {} scheme needs --calibration", scheme.name()),
        (_, false) => None,
    };
    let report = evaluate(&QuantizedModel::new(&m, k, record.as_ref(), a.int_kernels)?, &data)?;
    let header = format!(
        "scheme {} granularity {} bits {} cast_bits {}{}{}",
        scheme.name(),
        k.granularity.short(),
        k.bits,
        k.cast_bits,
        if a.int_kernels { " int-kernels" } else { "" },
        if a.corrupt { format!(" corrupt seed {}", a.seed) } else { String::new() }
    );
    if let Some(out) = &a.out {
        let doc = json!({
            "scheme": scheme.name(),
            "granularity": k.granularity,
            "bits": k.bits,
            "cast_bits": k.cast_bits,
            "int_kernels": a.int_kernels,
            "corrupt": a.corrupt,
            "seed": a.seed,
            "report": report,
        });
        write(out, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    }
    print!("{}", report_text(&header, &report));
    Ok(())
}

pub const COMPARE_COLUMNS: [&str; 7] = ["FP32", "Ours-T", "Ours-C", "Dyn-T", "Dyn-C", "Stat-T", "Stat-C"];

pub fn compare(a: CompareArgs) -> Result<()> {
    let m = model(&a.model)?;
    let test = maybe_corrupt(dataset(&a.data)?, a.corrupt, a.seed)?;
    let calib = calibration_subset(&dataset(&a.calib_data)?, a.samples)?;
    let p = prob_config(&a.prob)?;
    let mut cells = vec![evaluate_float(&m, &test)?];
    for scheme in Scheme::ALL {
        for g in [Granularity::PerTensor, Granularity::PerChannel] {
            let k = kind(scheme, g, &a.quant)?;
            cells.push(calibrate_and_evaluate(&m, &calib, &test, k, &p, a.int_kernels)?.top1_accuracy);
        }
    }
    let csv = format!(
        "{}\n{}\n",
        COMPARE_COLUMNS.join(","),
        cells.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join(",")
    );
    let table = format!(
        "{}\n{}\n",
        COMPARE_COLUMNS.iter().map(|c| format!("{c:>7}")).collect::<String>(),
        cells.iter().map(|c| format!("{c:>7.4}")).collect::<String>()
    );
    if let Some(out) = &a.out {
        write(out, &csv)?;
    }
    print!("{table}");
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let m = model(&a.model)?;
    let test = dataset(&a.data)?;
    let pool = dataset(&a.calib_data)?;
    let k = kind(Scheme::Probabilistic, a.granularity.into(), &a.quant)?;
    let base = ProbConfig { coverage: a.coverage, ..ProbConfig::default() };
    let mut csv = String::from("sweep,value,repeat,seed,calibration_samples,top1_accuracy\n");

    let calib = calibration_subset(&pool, a.samples)?;
    for g in GAMMAS {
        let p = ProbConfig { gamma: StrideConfig::new(g)?, ..base };
        let acc = calibrate_and_evaluate(&m, &calib, &test, k, &p, a.int_kernels)?.top1_accuracy;
        let _ = writeln!(csv, "gamma,{g},0,-,{},{acc:.4}", calib.len());
    }
    for n in CALIBRATION_SIZES {
        if n > pool.len() {
            bail!("calibration size {n} exceeds the {} available samples", pool.len());
        }
        for r in 0..REPEATS {
            let seed = a.seed.wrapping_mul(1_000_003).wrapping_add(n as u64 * REPEATS + r);
            let subset = pool.random_subset(n, seed)?;
            let acc = calibrate_and_evaluate(&m, &subset, &test, k, &base, a.int_kernels)?.top1_accuracy;
            let _ = writeln!(csv, "calibration_size,{n},{r},{seed},{n},{acc:.4}");
        }
    }
    if let Some(out) = &a.out {
        write(out, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

pub fn corrupt(a: CorruptArgs) -> Result<()> {
    let data = dataset(&a.data)?;
    let kinds = if a.kinds.is_empty() { CorruptionKind::ALL.to_vec() } else { a.kinds };
    let out = corrupt_dataset(&data, &kinds, a.seed)?;
    save_qds(&out, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("corrupted {} samples of shape {}", out.len(), out.shape());
    Ok(())
}

pub fn cost(a: CostArgs) -> Result<()> {
    let m = model(&a.model)?;
    let r = costmodel::report(&m, a.scheme.into(), &StrideConfig::new(a.gamma)?, a.cast_bits)?;
    if let Some(out) = &a.out {
        write(out, &r.to_csv())?;
    }
    print!("{}", r.to_table());
    Ok(())
}

pub fn make_desk(a: MakeDeskArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let images = DeskImages::default();
    let m = desk_model()?;
    let calib = desk_dataset(a.calib, a.seed.wrapping_add(11), &images)?;
    let test = desk_dataset(a.test, a.seed.wrapping_add(22), &images)?;
    save_qmod(&m, a.out.join("desk.qmod"))?;
    save_qds(&calib, a.out.join("desk_calib.qds"))?;
    save_qds(&test, a.out.join("desk_test.qds"))?;
    println!(
        "wrote desk.qmod ({} layers), desk_calib.qds ({} samples), desk_test.qds ({} samples) to {}",
        m.layers().len(),
        calib.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}
