//! Acceptance criteria, one line each. MNIST is read from `RFCNN_DATA_DIR`
//! (default `/root/data/mnist`). Criterion 7 trains two paper-sized networks
//! for ten epochs and only runs with `RFCNN_FULL=1`.
//!
//! `cargo test -p rfcnn --test acceptance -- 6` runs a single criterion.

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfcnn::autodiff::gradcheck::relative_error;
use rfcnn::autodiff::{output_shape, Parameter, PatchGeometry, Tensor};
use rfcnn::device::{self, DeviceParams};
use rfcnn::hardware::{count_devices, sequential_schedule, simulate_sequential_conv, write_line_groups, Arrangement};
use rfcnn::layers::{RfConv2d, SynapseKind, ZetaFilter};
use rfcnn::mnist::{canonical_paths, load_split, parse_idx, Dataset, MnistError, Split};
use rfcnn::network::{LayerSpec, NetworkConfig};
use rfcnn::training::{metrics_path, SplitName, TrainConfig, Trainer};
use rfcnn::verify::{run_suite, SuiteOptions};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::*;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("RFCNN_DATA_DIR").map_or_else(|| PathBuf::from("/root/data/mnist"), PathBuf::from)
}

fn c1_device_curves() -> Verdict {
    let p = DeviceParams::default();
    let osc = |i| device::oscillator_power(i, &p).unwrap();
    let exact = [(2.0, 0.0), (4.0, 0.25), (8.0, 0.5)];
    let worst = exact.iter().map(|&(i, v)| (osc(i) - v).abs()).fold(0.0, f64::max);

    // silent below threshold, rising and concave up to the clamp, flat after
    let grid: Vec<f64> = (0..=1200).map(|n| n as f64 * 0.01).collect();
    let vals: Vec<f64> = grid.iter().map(|&i| osc(i)).collect();
    let silent = grid.iter().zip(&vals).all(|(&i, &v)| i > 2.0 || v == 0.0);
    let flat = grid.iter().zip(&vals).all(|(&i, &v)| i < 8.0 || v == 0.5);
    let inside: Vec<f64> = grid
        .iter()
        .zip(&vals)
        .filter(|(&i, _)| i > 2.0 && i < 8.0)
        .map(|(_, &v)| v)
        .collect();
    let rising = inside.windows(2).all(|w| w[1] > w[0]);
    let concave = inside.windows(3).all(|w| w[2] - w[1] < w[1] - w[0]);
    let shape = silent && flat && rising && concave;

    // zero at resonance, sign flip across it, linear in power
    let f_res = 1.5;
    let v = |pw: f64, f: f64| device::rectified_voltage(pw, f, f_res, &p).unwrap();
    let zero = v(1.0, f_res) == 0.0;
    let flips = [1e-3, 1e-2, 0.1]
        .iter()
        .all(|&d| v(1.0, f_res - d) < 0.0 && v(1.0, f_res + d) > 0.0);
    let mut lin = 0.0f64;
    for f in (0..200).map(|n| 1.0 + n as f64 * 0.005) {
        let unit = v(1.0, f);
        if unit == 0.0 {
            continue;
        }
        for pw in [0.2, 0.4, 0.6, 0.8, 1.0] {
            lin = lin.max((v(pw, f) - pw * unit).abs() / (pw * unit).abs());
        }
    }
    check(
        worst <= 1e-12 && shape && zero && flips && lin <= 1e-12,
        format!(
            "max |p - exact| = {worst:.1e}, oscillator shape ok = {shape}, zero at f_res = {zero}, \
             sign flip = {flips}, linearity residual = {lin:.1e}"
        ),
    )
}

fn c2_gradients() -> Verdict {
    let report = run_suite(&SuiteOptions::default()).expect("suite runs");
    let errors = report
        .checks
        .iter()
        .map(|c| format!("{}={:.1e}", c.name, c.relative_error))
        .collect::<Vec<_>>()
        .join(" ");
    check(report.passed(), errors)
}

fn random_conv(rng: &mut ChaCha8Rng) -> (Tensor<f64>, RfConv2d<f64>) {
    loop {
        let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
        let (c, m, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (stride, padding) = (rng.gen_range(1..=2), rng.gen_range(0..=1));
        if output_shape(h, w, k, stride, padding).is_err() {
            continue;
        }
        let n = k * k * c * m;
        let zeta = Tensor::new(vec![k, k, c, m], (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
        let bias = Tensor::new(vec![m], (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let layer = RfConv2d {
            filter: ZetaFilter {
                zeta: Parameter::new(zeta),
                bias: Parameter::new(bias),
                gain: Parameter::new(Tensor::scalar(rng.gen_range(0.5..2.0))),
            },
            stride,
            padding,
            device: DeviceParams::default(),
            synapse: SynapseKind::Spintronic,
        };
        let input = Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        return (input, layer);
    }
}

/// Direct sum over every output, filter and tap.
fn brute_force(input: &Tensor<f64>, layer: &RfConv2d<f64>) -> Vec<f64> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let zeta = &layer.filter.zeta.value;
    let (k, m_n) = (zeta.shape()[0], zeta.shape()[3]);
    let (s, p) = (layer.stride, layer.padding);
    let (ho, wo) = output_shape(h, w, k, s, p).unwrap();
    let gain = layer.filter.gain.value.data()[0];
    let mut out = Vec::new();
    for oh in 0..ho {
        for ow in 0..wo {
            for m in 0..m_n {
                let mut acc = layer.filter.bias.value.data()[m];
                for i in 0..k {
                    for j in 0..k {
                        for ch in 0..c {
                            let y = (oh * s + i) as isize - p as isize;
                            let x = (ow * s + j) as isize - p as isize;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            let pw = input.data()[(y as usize * w + x as usize) * c + ch];
                            let z = zeta.data()[((i * k + j) * c + ch) * m_n + m];
                            acc += pw * device::synaptic_weight_zeta(z, &layer.device).unwrap();
                        }
                    }
                }
                out.push(gain * acc);
            }
        }
    }
    out
}

fn c3_conv_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut brute, mut carriers) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (input, layer) = random_conv(&mut rng);
        let fast = layer.forward(&input).unwrap();
        brute = brute.max(relative_error(fast.data(), &brute_force(&input, &layer)));
        let plan: Vec<f64> = (0..input.len()).map(|_| rng.gen_range(0.5..5.0)).collect();
        let (w, c) = (input.shape()[1], input.shape()[2]);
        let explicit = layer
            .forward_with_carriers(&input, |y, x, ch| plan[(y * w + x) * c + ch])
            .unwrap();
        carriers = carriers.max(relative_error(fast.data(), explicit.data()));
    }
    check(
        brute <= 1e-6 && carriers <= 1e-10,
        format!("50 instances: vs brute force {brute:.1e} (<= 1e-6), frequency path vs zeta path {carriers:.1e} (<= 1e-10)"),
    )
}

fn c4_sequential() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut steps_ok = true;
    for _ in 0..50 {
        let (input, layer) = random_conv(&mut rng);
        let fast = layer.forward(&input).unwrap();
        let run = simulate_sequential_conv(&input, &layer).unwrap();
        worst = worst.max(relative_error(fast.data(), run.output.data()));
        steps_ok &= run.steps.len() == fast.shape()[0] * fast.shape()[1];
    }
    let sched = sequential_schedule(&NetworkConfig::paper()).unwrap();
    let paper_ok = sched.layers[0].sequential_steps == 676 && sched.layers.iter().all(|l| l.parallel_steps == 1);
    check(
        worst <= 1e-12 && steps_ok && paper_ok,
        format!("50 instances: max rel err {worst:.1e}, steps H_out*W_out vs 1: {}", steps_ok && paper_ok),
    )
}

fn accounting_case(h: usize, w: usize, k: usize, c: usize, m: usize, arrangement: Arrangement) -> Result<(), String> {
    let cfg = NetworkConfig {
        input: [h, w, c],
        layers: vec![
            LayerSpec::Conv { filters: m, kernel: k, stride: 1, padding: 0 },
            LayerSpec::Oscillator,
            LayerSpec::Dense { outputs: 1 },
        ],
        ..NetworkConfig::desk()
    };
    let report = &count_devices(&cfg, arrangement).map_err(|e| e.to_string())?.layers[0];
    let geom = PatchGeometry::new(h, w, c, k, 1, 0).map_err(|e| e.to_string())?;
    let groups = write_line_groups(&geom, m, arrangement);

    let resonators: usize = groups.iter().map(|g| g.members.len()).sum();
    let mut cells = HashSet::new();
    let mut chains = HashMap::new();
    let mut lines = HashSet::new();
    for g in &groups {
        for r in &g.members {
            *chains.entry((r.h, r.w, r.m)).or_insert(0usize) += 1;
            lines.insert(((r.h + r.i) * w + r.w + r.j) * c + r.c);
        }
        cells.extend(g.positions.iter().copied());
    }
    let per_line: HashSet<usize> = groups.iter().map(|g| g.members.len()).collect();
    let chain_len: HashSet<usize> = chains.values().copied().collect();
    let expect = |what: &str, closed: usize, counted: usize| {
        if closed == counted {
            Ok(())
        } else {
            Err(format!("{what}: closed form {closed}, enumerated {counted}"))
        }
    };
    expect("resonators", report.resonators, resonators)?;
    expect("placement cells", report.resonators, cells.len())?;
    expect("write lines", report.write_lines, groups.len())?;
    expect("field lines", report.field_lines, lines.len())?;
    expect("oscillators", report.oscillators, chains.len())?;
    if per_line.len() != 1 || !per_line.contains(&report.devices_per_write_line) {
        return Err(format!("devices per write line {per_line:?} vs {}", report.devices_per_write_line));
    }
    if chain_len.len() != 1 || !chain_len.contains(&report.chain_length) {
        return Err(format!("chain length {chain_len:?} vs {}", report.chain_length));
    }
    Ok(())
}

fn c5_accounting() -> Verdict {
    let mut configs = 0;
    let mut mismatches = Vec::new();
    for h in 1..=6 {
        for w in 1..=6 {
            for k in 1..=3.min(h).min(w) {
                for c in 1..=3 {
                    for m in 1..=3 {
                        for arrangement in [Arrangement::Crossbar, Arrangement::Compact] {
                            configs += 1;
                            if let Err(e) = accounting_case(h, w, k, c, m, arrangement) {
                                mismatches.push(format!("{h}x{w}x{c} k{k} m{m} {arrangement}: {e}"));
                            }
                        }
                    }
                }
            }
        }
    }
    let paper = count_devices(&NetworkConfig::paper(), Arrangement::Crossbar).unwrap();
    let (l1, l2) = (&paper.layers[0], &paper.layers[1]);
    let paper_ok = l1.resonators == 540_800
        && l2.resonators == 6_195_200
        && l1.write_lines == 800
        && l1.devices_per_write_line == 676;
    check(
        mismatches.is_empty() && paper_ok,
        format!(
            "{configs} small configs, {} mismatches{}; paper: {} and {} resonators, {} write-lines of {} devices",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default(),
            l1.resonators,
            l2.resonators,
            l1.write_lines,
            l1.devices_per_write_line
        ),
    )
}

struct DeskRun {
    test_accuracy: f64,
    checkpoint: Vec<u8>,
    csv: String,
    seconds: f64,
}

fn desk_run() -> Result<DeskRun, String> {
    let dir = data_dir();
    let train = load_split(&dir, Split::Train).map_err(|e| e.to_string())?;
    let test = load_split(&dir, Split::Test).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::desk();
    let train = train.take(cfg.train_limit.expect("desk preset limits the training set"));
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().join("desk.ckpt");
    let t0 = Instant::now();
    let mut trainer = Trainer::<f32>::new(&NetworkConfig::desk(), cfg).map_err(|e| e.to_string())?;
    trainer.fit(&train, &test, Some(&out), |_, _, _| {}).map_err(|e| e.to_string())?;
    let seconds = t0.elapsed().as_secs_f64();
    Ok(DeskRun {
        test_accuracy: trainer.metrics().last(SplitName::Test).expect("one epoch ran").accuracy_percent,
        checkpoint: std::fs::read(&out).map_err(|e| e.to_string())?,
        csv: std::fs::read_to_string(metrics_path(&out)).map_err(|e| e.to_string())?,
        seconds,
    })
}

static FIRST_DESK: OnceLock<Result<DeskRun, String>> = OnceLock::new();

fn c6_desk() -> Verdict {
    match FIRST_DESK.get_or_init(desk_run) {
        Ok(r) => check(
            r.test_accuracy >= 95.0,
            format!(
                "test accuracy {:.2}% (>= 95%) on 10000 test images, trained in {:.0} s",
                r.test_accuracy, r.seconds
            ),
        ),
        Err(e) => Fail(format!("desk run failed: {e}")),
    }
}

fn c7_full() -> Verdict {
    if std::env::var("RFCNN_FULL").map_or(true, |v| v != "1") {
        return Skip("long-running; set RFCNN_FULL=1 to train both full-size networks for 10 epochs".into());
    }
    let dir = data_dir();
    let (train, test) = match (load_split(&dir, Split::Train), load_split(&dir, Split::Test)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Fail(e.to_string()),
    };
    let mut acc = Vec::new();
    for synapse in [SynapseKind::Spintronic, SynapseKind::Conventional] {
        let net = NetworkConfig { synapse, ..NetworkConfig::paper() };
        let mut t = Trainer::<f32>::new(&net, TrainConfig::default()).unwrap();
        t.fit(&train, &test, None, |e, tr, te| {
            eprintln!(
                "  {synapse:?} epoch {e}: train {:.2}% test {:.2}%",
                tr.accuracy_percent, te.accuracy_percent
            )
        })
        .unwrap();
        acc.push(t.metrics().last(SplitName::Test).unwrap().accuracy_percent);
    }
    let gap = (acc[1] - acc[0]).abs();
    check(
        acc[0] >= 98.6 && gap <= 0.5,
        format!(
            "spintronic {:.2}% (>= 98.6%), conventional {:.2}%, gap {gap:.2} (<= 0.5)",
            acc[0], acc[1]
        ),
    )
}

fn c8_determinism() -> Verdict {
    let first = match FIRST_DESK.get_or_init(desk_run) {
        Ok(r) => r,
        Err(e) => return Fail(format!("desk run failed: {e}")),
    };
    match desk_run() {
        Ok(second) => {
            let ckpt = first.checkpoint == second.checkpoint;
            let csv = first.csv == second.csv;
            check(ckpt && csv, format!("two desk runs: checkpoint bytes equal = {ckpt}, metrics CSV equal = {csv}"))
        }
        Err(e) => Fail(format!("second desk run failed: {e}")),
    }
}

fn c9_parser() -> Verdict {
    let dir = data_dir();
    let mut notes = Vec::new();
    let mut ok = true;
    for (split, n) in [(Split::Train, 60_000u32), (Split::Test, 10_000u32)] {
        let (img_path, lbl_path) = canonical_paths(&dir, split);
        let (img, lbl) = match (std::fs::read(&img_path), std::fs::read(&lbl_path)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Fail(format!("cannot read MNIST under {}", dir.display())),
        };
        let (h, _) = parse_idx(&img).unwrap();
        let be = |at: usize| u32::from_be_bytes(img[at..at + 4].try_into().unwrap());
        ok &= h.magic == 0x803 && h.dims == vec![n, 28, 28] && h.dims == vec![be(4), be(8), be(12)];
        let ds = Dataset::from_idx(&img, &lbl).unwrap();
        ok &= ds.len() == n as usize;
        notes.push(format!("{} images", ds.len()));

        let mut bad = img.clone();
        bad[3] = 0x04;
        ok &= matches!(parse_idx(&bad), Err(MnistError::BadMagic(0x804)));
        ok &= matches!(parse_idx(&img[..10]), Err(MnistError::TruncatedHeader { expected: 16, actual: 10 }));
        ok &= matches!(parse_idx(&img[..img.len() - 1]), Err(MnistError::Payload { .. }));
        ok &= matches!(parse_idx(&lbl[..6]), Err(MnistError::TruncatedHeader { expected: 8, actual: 6 }));
    }
    check(ok, format!("{}; corrupt magic and truncation rejected", notes.join(", ")))
}

type Criterion = (u8, &'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "device curves", c1_device_curves),
        (2, "gradient suite", c2_gradients),
        (3, "convolution oracle", c3_conv_oracle),
        (4, "sequential = parallel", c4_sequential),
        (5, "hardware accounting", c5_accounting),
        (6, "desk-scale learning", c6_desk),
        (7, "paper-scale reproduction", c7_full),
        (8, "determinism", c8_determinism),
        (9, "MNIST parser", c9_parser),
    ];
    let only: Option<u8> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t0 = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Fail("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("criterion {n} {name:<26} {tag}  {detail}  [{secs:.1}s]");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
