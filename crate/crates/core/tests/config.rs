use std::path::PathBuf;

use cskd::config::{RunConfig, RunDir, CONFIG_FILE, FAILURE_MARKER};
use cskd::cskd::{DecayStrategy, DistillMode};
use cskd::train::Method;
use cskd::Error;
use proptest::prelude::*;

fn config_err(r: cskd::Result<RunConfig>) -> String {
    match r {
        Err(Error::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn decay_key_selects_strategy() {
    let cfg = RunConfig::parse("decay=cosine\n", &[]).unwrap();
    assert_eq!(cfg.decay, DecayStrategy::Cosine);
    assert_eq!(cfg.distill_run().decay, DecayStrategy::Cosine);
}

#[test]
fn cskd_weight_two_is_accepted() {
    let cfg = RunConfig::parse("cskd_weight=2.0", &[]).unwrap();
    assert_eq!(cfg.distill_config().cskd_weight, 2.0);
}

#[test]
fn zero_temperature_is_rejected_with_its_line() {
    let msg = config_err(RunConfig::parse("# header\nseed=3\ntemperature=0\n", &[]));
    assert!(msg.contains("line 3"), "{msg}");
    assert!(msg.contains("temperature"), "{msg}");
}

#[test]
fn unknown_key_is_named_with_its_line() {
    let msg = config_err(RunConfig::parse("lr=0.001\n\nlearning_rate=3\n", &[]));
    assert!(msg.contains("line 3") && msg.contains("learning_rate"), "{msg}");
}

#[test]
fn type_mismatch_is_named_with_its_line() {
    let msg = config_err(RunConfig::parse("epochs=ten", &[]));
    assert!(msg.contains("line 1") && msg.contains("epochs"), "{msg}");
    let msg = config_err(RunConfig::parse("record_time=maybe", &[]));
    assert!(msg.contains("record_time"), "{msg}");
    let msg = config_err(RunConfig::parse("distill_mode=medium", &[]));
    assert!(msg.contains("distill_mode"), "{msg}");
}

#[test]
fn line_without_equals_is_rejected() {
    let msg = config_err(RunConfig::parse("epochs=3\nseed 4\n", &[]));
    assert!(msg.contains("line 2"), "{msg}");
}

#[test]
fn flags_override_file_values() {
    let over = vec![("epochs".to_string(), "7".to_string()), ("method".into(), "deit".into())];
    let cfg = RunConfig::parse("epochs=3\nmethod=cskd\n", &over).unwrap();
    assert_eq!(cfg.epochs, 7);
    assert_eq!(cfg.method, Method::Deit);
    let msg = config_err(RunConfig::parse("", &[("bogus".into(), "1".into())]));
    assert!(msg.contains("command line") && msg.contains("bogus"), "{msg}");
}

#[test]
fn cross_field_violation_names_the_keys() {
    let msg = config_err(RunConfig::parse("epochs=2\nwarmup_epochs=3\n", &[]));
    assert!(msg.contains("warmup_epochs") && msg.contains("line 2"), "{msg}");
    let msg = config_err(RunConfig::parse("embed_dim=30\nnum_heads=4\n", &[]));
    assert!(msg.contains("embed_dim"), "{msg}");
}

#[test]
fn comments_and_blank_lines_are_ignored() {
    let cfg = RunConfig::parse("  # comment\n\nseed = 11  # trailing\n", &[]).unwrap();
    assert_eq!(cfg.seed, 11);
}

#[test]
fn print_lists_every_key_once() {
    let text = RunConfig::default().print();
    let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, RunConfig::KEYS);
}

#[test]
fn shipped_configs_parse() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["smoke.txt", "teacher.txt"] {
        RunConfig::load(&root.join(name), &[]).unwrap();
    }
    assert!(matches!(
        RunConfig::load(&root.join("absent.txt"), &[]),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn run_dir_locks_and_freezes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run");
    let cfg = RunConfig::parse("seed=5", &[]).unwrap();
    let dir = RunDir::create(&path, &cfg).unwrap();
    let frozen = std::fs::read_to_string(path.join(CONFIG_FILE)).unwrap();
    assert_eq!(RunConfig::parse(&frozen, &[]).unwrap(), cfg);
    assert!(matches!(RunDir::create(&path, &cfg), Err(Error::Config(_))));
    dir.mark_failed(&Error::Numeric("loss is NaN".into())).unwrap();
    assert!(path.join(FAILURE_MARKER).exists());
    drop(dir);
    // Lock released; a fresh attempt clears the stale failure marker.
    let _again = RunDir::create(&path, &cfg).unwrap();
    assert!(!path.join(FAILURE_MARKER).exists());
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (
        (
            "[a-z][a-z0-9_/]{0,12}",
            0usize..5000,
            prop::sample::select(vec![(4usize, 8usize), (8, 4), (2, 16)]),
            prop::sample::select(vec![(16usize, 2usize), (32, 4), (48, 3)]),
            1usize..5,
            1usize..5,
        ),
        (
            prop::sample::select(vec![Method::Cskd, Method::Deit]),
            prop::sample::select(vec![DistillMode::Hard, DistillMode::Soft, DistillMode::SoftHard]),
            prop::sample::select(DecayStrategy::ALL.to_vec()),
            0.01f64..10.0,
            0.0f64..4.0,
            any::<u64>(),
            any::<bool>(),
        ),
        (1usize..50, 1e-6f64..1e-2, 0.0f64..0.2),
    )
        .prop_map(
            |(
                (root, limit, (patch, _), (dim, heads), layers, mlp),
                (method, mode, decay, temperature, weight, seed, record),
                (epochs, lr, wd),
            )| RunConfig {
                data_root: PathBuf::from(root),
                train_limit: limit,
                patch_size: patch,
                embed_dim: dim,
                num_heads: heads,
                num_layers: layers,
                mlp_ratio: mlp,
                method,
                distill_mode: mode,
                decay,
                temperature,
                cskd_weight: weight,
                seed,
                record_time: record,
                epochs,
                warmup_epochs: epochs / 2,
                lr,
                lr_min: lr / 10.0,
                weight_decay: wd,
                ..RunConfig::default()
            },
        )
}

proptest! {
    #[test]
    fn print_then_parse_round_trips(cfg in arb_config()) {
        let text = cfg.print();
        let back = RunConfig::parse(&text, &[]).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
