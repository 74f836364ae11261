use std::path::PathBuf;
use std::process::{Command, Output};

use mupdepth::cli::{self, Command as Sub};
use mupdepth::net::{LearningRateSchedule, NetworkState};
use mupdepth::observables::{Batch, Observable};
use mupdepth::error::Result;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mupdepth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mupdepth-cli-tests-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn parse(line: &str) -> cli::Cli {
    let args: Vec<String> = std::iter::once("mupdepth").chain(line.split_whitespace()).map(String::from).collect();
    cli::parse(args).expect("valid command line")
}

#[test]
fn check_gradients_passes_and_is_reproducible() {
    let a = bin(&["check-gradients", "--nets", "20", "--oracle-nets", "10", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let b = bin(&["check-gradients", "--nets", "20", "--oracle-nets", "10", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.starts_with("suite,check,max_rel_error,tolerance,worst_net,worst_seed,comparisons,passed\n"));
}

#[test]
fn injected_sign_flip_fails_with_the_offending_seed() {
    let out = bin(&["check-gradients", "--nets", "5", "--oracle-nets", "2", "--inject-sign-flip"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("FAIL finite_difference/loss_gradient"), "{err}");
    assert!(err.contains("seed"));
}

#[test]
fn verify_init_flags_the_paper_first_layer_factor() {
    let ok = bin(&["verify-init", "--width", "64", "--depth", "4", "--replicates", "400"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));

    let r = cli::execute(&parse("verify-init --width 64 --depth 4 --replicates 400 --init mean-field-paper")).unwrap();
    assert_eq!(r.exit_code(), 1);
    let layer1 = r.check("second_moment_identity/layer1").unwrap();
    assert!((layer1.value - 2.0).abs() < 0.1, "{}", layer1.value);
    let g = r.check("fourth_moment_gaussian/layer1").unwrap();
    assert!(g.passed(), "{g:?}");
}

#[test]
fn x_file_length_must_match_the_input_width() {
    let path = scratch("x.txt");
    std::fs::write(&path, "1 2 3").unwrap();
    let out = bin(&["verify-init", "--width", "4", "--depth", "2", "--replicates", "30", "--x-file", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n0 is 4"));
    std::fs::write(&path, "[1, 2, 3, 4]").unwrap();
    let out = bin(&["verify-init", "--width", "4", "--depth", "2", "--replicates", "30", "--x-file", path.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_keys_are_validated_and_overridden() {
    let path = scratch("cfg.json");
    std::fs::write(&path, r#"{"width": 16, "depth": 2, "replicates": 50, "format": "json"}"#).unwrap();
    let out = bin(&["verify-init", "--config", path.to_str().unwrap(), "--replicates", "60"]);
    assert_ne!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["rows"][0]["replicates"], 60);
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);

    std::fs::write(&path, r#"{"width": 16, "bogus": 1}"#).unwrap();
    let out = bin(&["verify-init", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(bin(&["sweep-depth", "--eta", "0"]).status.code(), Some(2));
    assert_eq!(bin(&["verify-init", "--width", "4", "--widths", "4,4,1"]).status.code(), Some(2));
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(2));
    // Two layers cannot support a fit.
    let out = bin(&["sweep-depth", "--width", "8", "--depth", "8", "--layers", "4,8", "--replicates", "20"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 3"));
}

#[test]
fn help_records_default_scales() {
    let out = bin(&["sweep-depth", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("n = 256, L = 40"), "{text}");
}

/// Returns `layer³` for every cell, whatever the network.
fn cubic_stub(_: &NetworkState, _: &Batch, _: &LearningRateSchedule, cells: &[(Observable, usize)]) -> Result<Vec<f64>> {
    Ok(cells.iter().map(|&(_, l)| (l as f64).powi(3)).collect())
}

#[test]
fn sweep_depth_fits_a_synthetic_cubic_exactly() {
    let cli = parse("sweep-depth --width 6 --depth 8 --layers 1,2,4,8 --replicates 3 --observables delta_z_sq_linearized");
    let Sub::SweepDepth(args) = &cli.command else { unreachable!() };
    let r = cli::sweep_depth::run_with(args, &cubic_stub).unwrap();
    let fit = r.fit("delta_z_sq_linearized").unwrap();
    assert!((fit.exponent - 3.0).abs() < 1e-12);
    assert!((fit.r_squared - 1.0).abs() < 1e-12);
    // Replicate-free stub: the checks pass on value but are flagged inconclusive.
    assert_eq!(r.exit_code(), 3);
}

#[test]
fn sweep_depth_over_network_depth() {
    let cli = parse("sweep-depth --width 6 --depths 2,4,8 --replicates 25");
    let Sub::SweepDepth(args) = &cli.command else { unreachable!() };
    let r = cli::sweep_depth::run_with(args, &cubic_stub).unwrap();
    assert_eq!(r.fit("delta_z_sq_actual").unwrap().against, "depth");
    assert!((r.fit("c").unwrap().exponent - 3.0).abs() < 1e-12);
    assert!(r.rows.iter().all(|row| row.axis_name == "depth" && row.layer as f64 == row.axis_value));
}

fn unit_stub(_: &NetworkState, _: &Batch, _: &LearningRateSchedule, cells: &[(Observable, usize)]) -> Result<Vec<f64>> {
    Ok(vec![1.0; cells.len()])
}

#[test]
fn solve_lr_inverts_a_unit_mean_and_skips_the_fit_for_one_depth() {
    let cli = parse("solve-lr --width 6 --depth 5 --replicates 30");
    let Sub::SolveLr(args) = &cli.command else { unreachable!() };
    let r = cli::solve_lr::run_with(args, &unit_stub).unwrap();
    let row = r.rows.iter().find(|row| row.observable == "eta_star").unwrap();
    assert_eq!((row.mean, row.layer), (1.0, 5));
    assert!(r.fits.is_empty() && r.checks.is_empty());
    assert_eq!(r.exit_code(), 0);
}

#[test]
fn solve_lr_small_run_fits_over_depth() {
    let r = cli::execute(&parse("solve-lr --width 16 --depths 2,4,8 --replicates 200")).unwrap();
    let stars: Vec<f64> = r.rows.iter().filter(|row| row.observable == "eta_star").map(|row| row.mean).collect();
    assert_eq!(stars.len(), 3);
    assert!(stars.windows(2).all(|w| w[1] < w[0]), "{stars:?}");
    assert!(r.fit("eta_star").unwrap().exponent < -1.0);
}

#[test]
fn solve_lr_refinement_lands_near_the_linearized_estimate_for_a_shallow_net() {
    let r = cli::execute(&parse("solve-lr --width 32 --depth 2 --replicates 200 --refine")).unwrap();
    assert!(r.warnings.iter().all(|w| !w.contains("refinement")), "{:?}", r.warnings);
    let lin = r.rows.iter().find(|row| row.observable == "eta_star").unwrap().mean;
    let refined = r.rows.iter().find(|row| row.observable == "eta_star_refined").unwrap().mean;
    assert!(refined > lin / 4.0 && refined < lin * 4.0, "{lin} {refined}");
}

#[test]
fn verify_lemmas_is_inconclusive_at_two_replicates() {
    let out = bin(&[
        "verify-lemmas", "--width", "16", "--replicates", "2", "--gram-replicates", "2",
        "--ab-replicates", "2", "--ctilde-replicates", "2",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn wrong_target_variance_breaks_the_decomposition() {
    let line = "verify-lemmas --width 16 --depth 4 --replicates 2000 --gram-replicates 50 --ab-replicates 50 --ctilde-replicates 20";
    let good = cli::execute(&parse(line)).unwrap();
    let bad = cli::execute(&parse(&format!("{line} --target-variance 2"))).unwrap();
    for l in 1..=4 {
        let name = format!("decomposition/layer{l}");
        assert!(good.check(&name).unwrap().passed(), "{:?}", good.check(&name));
        assert!(!bad.check(&name).unwrap().passed(), "{:?}", bad.check(&name));
    }
}

#[test]
fn output_bytes_do_not_depend_on_workers() {
    for format in ["csv", "json"] {
        let mut files = Vec::new();
        for workers in ["1", "3"] {
            let path = scratch(&format!("det-{format}-{workers}"));
            let out = bin(&[
                "sweep-depth", "--width", "12", "--depth", "6", "--layers", "1,2,4", "--replicates", "40",
                "--eta", "0.01", "--workers", workers, "--format", format, "--output", path.to_str().unwrap(),
            ]);
            assert_ne!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
            files.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(files[0], files[1]);
        assert!(!files[0].is_empty());
    }
}
