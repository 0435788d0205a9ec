use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use octrap::compensation::CalibrationConstants;
use octrap::experiments::{
    batch_csv, reproduce, run_compensation_batch, run_compensation_demo, run_completeness, run_h_calibration,
    run_scan, run_success_tables, run_voltage_calibration, trap_from_config, write_calibration, write_completeness,
    write_compensation, write_h_calibration, write_scan, write_tables, HKind, ScanSpec, REPRODUCE_TARGETS,
};
use octrap::io::{fmt_num, KeyValues};
use octrap::{Result, TrapError};

#[derive(Parser)]
#[command(name = "octrap", version, about = "Defect analysis and compensation for octupole RF ion traps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file (`key = value`, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "pixel-um")]
    pixel_um: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Scan one defect or coefficient and compare analytic with numeric minima.
    Scan(Common),
    /// Decompose random layouts and count cases below 2% and 4%.
    Completeness(Common),
    /// Success rates and coefficient spreads of the search protocol.
    Tables(Common),
    /// Iterative bias correction of a random layout.
    Compensate(Common),
    /// Fit a defect scaling coefficient against the field solver.
    CalibrateH(Common),
    /// Calibrate the coefficient-to-voltage map.
    CalibrateVoltages(Common),
    /// Regenerate a reference figure or table.
    Reproduce {
        target: String,
        #[command(flatten)]
        common: Common,
        /// Exit with status 4 if a reproduction check fails.
        #[arg(long)]
        check: bool,
    },
}

fn load(common: &Common, known: &[&str]) -> Result<KeyValues> {
    let kv = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| TrapError::InvalidConfig(format!("{}: {e}", p.display())))?;
            KeyValues::parse(&text).map_err(|e| TrapError::InvalidConfig(e.to_string()))?
        }
        None => KeyValues::default(),
    };
    const TRAP: [&str; 7] = ["r0_mm", "rd_mm", "v_rf_V", "rf_freq_MHz", "mass_u", "charge_e", "pixel_um"];
    for k in kv.keys() {
        if !known.contains(&k) && !TRAP.contains(&k) {
            return Err(TrapError::InvalidConfig(format!("unknown key `{k}`")));
        }
    }
    Ok(kv)
}

fn with_overrides(mut kv: KeyValues, common: &Common) -> KeyValues {
    if let Some(p) = common.pixel_um {
        kv.push_num("pixel_um", p);
    }
    kv
}

fn num(kv: &KeyValues, key: &str, default: f64) -> Result<f64> {
    kv.num_or(key, default).map_err(|e| TrapError::InvalidConfig(e.to_string()))
}

fn int(kv: &KeyValues, key: &str, default: u64) -> Result<u64> {
    match kv.get(key) {
        Some(v) => v.parse().map_err(|_| TrapError::InvalidConfig(format!("`{key}`: not an integer: {v}"))),
        None => Ok(default),
    }
}

fn list(kv: &KeyValues, key: &str, default: &[f64]) -> Result<Vec<f64>> {
    match kv.get(key) {
        Some(v) => v
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| TrapError::InvalidConfig(format!("`{key}`: not a number: {x}"))))
            .collect(),
        None => Ok(default.to_vec()),
    }
}

fn calibration(kv: &KeyValues, ratio: f64) -> Result<CalibrationConstants> {
    let r = CalibrationConstants::reference();
    CalibrationConstants::new(num(kv, "d_cal", r.d_cal)?, num(kv, "q_cal", r.q_cal)?, r.d_px_used, ratio)
        .map_err(|e| TrapError::InvalidConfig(e.to_string()))
}

fn cmd_scan(c: &Common) -> Result<()> {
    let path = c.config.as_ref().ok_or_else(|| TrapError::InvalidConfig("scan requires --config".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| TrapError::InvalidConfig(format!("{}: {e}", path.display())))?;
    let mut spec = ScanSpec::parse(&text)?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    if let Some(p) = c.pixel_um {
        spec.d_px = p * 1e-6;
        spec.validate()?;
    }
    let r = run_scan(&spec)?;
    write_scan(&r, &c.out)?;
    let failed = r.rows.iter().filter(|x| x.error.is_some()).count();
    println!("{}: {} points, {} failed, max d̄ = {} μm", spec.name, r.rows.len(), failed, r.max_d_bar().map(|d| fmt_num(d * 1e6)).unwrap_or("n/a".into()));
    Ok(())
}

fn cmd_completeness(c: &Common) -> Result<()> {
    let kv = with_overrides(load(c, &["seeds", "fraction", "seed"])?, c);
    let cfg = trap_from_config(&kv)?;
    let seeds = int(&kv, "seeds", 200)? as usize;
    let fraction = num(&kv, "fraction", 0.01)?;
    let first = c.seed.map_or_else(|| int(&kv, "seed", 0), Ok)?;
    let s = run_completeness(seeds, fraction, first, &cfg)?;
    write_completeness(&s, &cfg, &c.out)?;
    println!(
        "{} layouts at {}%: {} below 2%, {} below 4%",
        s.cases.len(),
        fmt_num(fraction * 100.0),
        s.count_below(0.02),
        s.count_below(0.04)
    );
    Ok(())
}

fn cmd_tables(c: &Common) -> Result<()> {
    let kv = load(c, &["cases", "d_px_um", "seed"])?;
    let cfg = trap_from_config(&kv)?;
    let cases = int(&kv, "cases", 50)? as usize;
    let px: Vec<f64> = match c.pixel_um {
        Some(p) => vec![p * 1e-6],
        None => list(&kv, "d_px_um", &[2.0, 4.0, 8.0])?.iter().map(|p| p * 1e-6).collect(),
    };
    let seed = c.seed.map_or_else(|| int(&kv, "seed", 0), Ok)?;
    let rows = run_success_tables(cases, &px, seed, &cfg)?;
    write_tables(&rows, seed, &cfg, &c.out)?;
    for r in &rows {
        let s = r.sigmas();
        println!(
            "d_px {} μm: {:.0}% / {:.0}%, sigma {:.2e} {:.2e} {:.2e} {:.2e}",
            fmt_num(r.d_px * 1e6),
            100.0 * r.success_rate(1.0),
            100.0 * r.success_rate(2.0),
            s[0],
            s[1],
            s[2],
            s[3]
        );
    }
    Ok(())
}

fn cmd_compensate(c: &Common) -> Result<()> {
    let kv = with_overrides(load(c, &["seed", "fraction", "steps", "batch", "d_cal", "q_cal"])?, c);
    let cfg = trap_from_config(&kv)?;
    let cal = calibration(&kv, cfg.ratio())?;
    let seed = c.seed.map_or_else(|| int(&kv, "seed", 0), Ok)?;
    let fraction = num(&kv, "fraction", 0.02)?;
    let steps = int(&kv, "steps", 10)? as usize;
    let batch = int(&kv, "batch", 1)?;
    if !(0.0..=0.04).contains(&fraction) || steps == 0 || steps > 100 || batch == 0 {
        return Err(TrapError::InvalidConfig("need fraction in [0, 0.04], 1..=100 steps, batch ≥ 1".into()));
    }
    if batch == 1 {
        let h = run_compensation_demo(seed, fraction, steps, &cfg, &cal)?;
        write_compensation(&format!("compensation_seed{seed}"), &h, seed, fraction, &cfg, &cal, &c.out)?;
        let db: Vec<String> = h.d_b().iter().map(|v| format!("{:.1}", v * 1e6)).collect();
        println!("d_b (μm): {}", db.join(" "));
        return Ok(());
    }
    let seeds: Vec<u64> = (seed..seed + batch).collect();
    let hs = run_compensation_batch(&seeds, fraction, steps, &cfg, &cal)?;
    for (s, h) in seeds.iter().zip(&hs) {
        write_compensation(&format!("compensation_seed{s}"), h, *s, fraction, &cfg, &cal, &c.out)?;
    }
    std::fs::create_dir_all(&c.out)?;
    std::fs::write(c.out.join("compensation_batch.csv"), batch_csv(&seeds, &hs))?;
    let red: Vec<f64> = hs.iter().filter(|h| h.steps.len() > 3).map(|h| 1.0 - h.d_b()[3] / h.d_b()[0]).collect();
    let tail: Vec<f64> = hs.iter().map(|h| h.d_b().last().cloned().unwrap_or(f64::NAN)).collect();
    println!(
        "{} seeds: mean reduction after 3 steps {:.1}%, mean final d_b {:.1} μm",
        hs.len(),
        100.0 * red.iter().sum::<f64>() / red.len().max(1) as f64,
        1e6 * tail.iter().sum::<f64>() / tail.len() as f64
    );
    Ok(())
}

fn cmd_calibrate_h(c: &Common) -> Result<()> {
    let kv = with_overrides(load(c, &["kind", "amplitudes", "ratios", "seed"])?, c);
    let kind = HKind::parse(kv.get("kind").unwrap_or("splitting"))?;
    let default_amp = match kind {
        HKind::Compression => vec![0.055],
        HKind::Sliding => vec![0.02],
        HKind::Splitting => vec![0.0275, 0.055],
        HKind::Shearing => vec![0.05],
    };
    let amps = list(&kv, "amplitudes", &default_amp)?;
    let ratios = list(&kv, "ratios", &[0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.375, 0.4, 0.45, 0.5])?;
    let px = num(&kv, "pixel_um", 1.0)? * 1e-6;
    let h = run_h_calibration(kind, &amps, &ratios, px)?;
    write_h_calibration(&h, &c.out)?;
    for p in &h.points {
        println!(
            "{} ratio {} amplitude {}: h = {:.4} [{:.4}, {:.4}], polynomial {:.4}",
            kind.as_str(),
            fmt_num(p.ratio),
            fmt_num(p.amplitude),
            p.h,
            p.h_lo,
            p.h_hi,
            kind.polynomial(p.ratio)
        );
    }
    Ok(())
}

fn cmd_calibrate_voltages(c: &Common) -> Result<()> {
    let kv = load(c, &["seed"])?;
    let cfg = trap_from_config(&kv)?;
    let px = c.pixel_um.unwrap_or(1.0) * 1e-6;
    let cal = run_voltage_calibration(&cfg, px)?;
    write_calibration(&cal, &cfg, &c.out)?;
    println!("d_cal = {:.5}, q_cal = {:.5}", cal.d_cal, cal.q_cal);
    Ok(())
}

fn cmd_reproduce(target: &str, c: &Common, check: bool) -> Result<bool> {
    if !REPRODUCE_TARGETS.contains(&target) {
        return Err(TrapError::InvalidConfig(format!("unknown target `{target}`; expected one of {}", REPRODUCE_TARGETS.join(", "))));
    }
    if c.config.is_some() {
        load(c, &[])?;
    }
    let out: &Path = &c.out;
    let checks = reproduce(target, out, c.seed.unwrap_or(0), c.pixel_um.map(|p| p * 1e-6))?;
    let mut ok = true;
    for ch in &checks {
        println!("{} {}: {}", if ch.passed { "PASS" } else { "FAIL" }, ch.name, ch.detail);
        ok &= ch.passed;
    }
    Ok(ok || !check)
}

fn exit_code(e: &TrapError) -> u8 {
    match e {
        TrapError::InvalidConfig(_)
        | TrapError::Parse(_)
        | TrapError::InvalidGeometry(_)
        | TrapError::OutOfBounds { .. } => 2,
        TrapError::Io(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Scan(c) => cmd_scan(c).map(|_| true),
        Cmd::Completeness(c) => cmd_completeness(c).map(|_| true),
        Cmd::Tables(c) => cmd_tables(c).map(|_| true),
        Cmd::Compensate(c) => cmd_compensate(c).map(|_| true),
        Cmd::CalibrateH(c) => cmd_calibrate_h(c).map(|_| true),
        Cmd::CalibrateVoltages(c) => cmd_calibrate_voltages(c).map(|_| true),
        Cmd::Reproduce { target, common, check } => cmd_reproduce(target, common, *check),
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
