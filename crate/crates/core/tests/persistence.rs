mod common;

use std::fs;

use common::{rng, tiny_config, TINY_RUN};
use xmodal::config::RunConfig;
use xmodal::data::Dataset;
use xmodal::eval::evaluate;
use xmodal::network::checkpoint;
use xmodal::{train, Error};

#[test]
fn config_text_round_trips() {
    let cfg = tiny_config();
    let again = RunConfig::from_kv(&cfg.to_kv()).unwrap();
    assert_eq!(again.to_kv(), cfg.to_kv());
    assert_eq!(again.model, cfg.model);
    assert_eq!(again.data, cfg.data);
}

#[test]
fn config_errors_name_the_key() {
    match RunConfig::from_kv("epochs = 2\nwarp_factor = 9\n") {
        Err(Error::UnknownKey(k)) => assert_eq!(k, "warp_factor"),
        other => panic!("expected unknown key, got {other:?}"),
    }
    assert!(matches!(RunConfig::from_kv("epochs = lots\n"), Err(Error::InvalidValue { .. })));
    assert!(RunConfig::from_kv("epochs = 2\nepochs = 3\n").is_err());
}

#[test]
fn dataset_file_round_trips() {
    let cfg = tiny_config();
    let data = Dataset::generate(&cfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.xmds");
    data.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), data);
    assert_eq!(Dataset::generate(&cfg.data).unwrap(), data);
}

#[test]
fn truncated_files_are_rejected() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("d.xmds");
    Dataset::generate(&cfg.data).unwrap().save(&data_path).unwrap();
    let bytes = fs::read(&data_path).unwrap();
    fs::write(&data_path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(Dataset::load(&data_path).is_err());

    let (net, store) = train::build(&cfg, &Dataset::generate(&cfg.data).unwrap()).unwrap();
    let ck = dir.path().join("w.ckpt");
    checkpoint::save(&store, &ck).unwrap();
    let bytes = fs::read(&ck).unwrap();
    fs::write(&ck, &bytes[..bytes.len() - 3]).unwrap();
    let mut fresh = net.init_params(&mut rng(0));
    assert!(checkpoint::load_into(&mut fresh, &ck).is_err());
}

#[test]
fn same_seed_gives_bitwise_identical_curves() {
    let cfg = tiny_config();
    let a = train::run(&cfg, None).unwrap();
    let b = train::run(&cfg, None).unwrap();
    let bits = |o: &train::RunOutcome| -> Vec<u64> {
        o.curve.iter().flat_map(|e| e.losses.iter().map(|l| l.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.result.to_json().unwrap(), b.result.to_json().unwrap());

    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(bits(&train::run(&other, None).unwrap()), bits(&a));
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let out = train::run(&cfg, Some(dir.path())).unwrap();
    for name in ["config.txt", "curve.json", "eval.json", "cmc.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    for epoch in 0..=cfg.epochs {
        assert!(train::checkpoint_path(dir.path(), epoch).exists());
    }
    let (_, test) = train::datasets(&cfg).unwrap();
    let mut store = out.net.init_params(&mut rng(42));
    checkpoint::load_into(&mut store, &train::checkpoint_path(dir.path(), cfg.epochs)).unwrap();
    let again = evaluate(&out.net, &store, &test, &cfg.eval, None).unwrap();
    assert_eq!(again.to_json().unwrap(), out.result.to_json().unwrap());
    assert_eq!(fs::read_to_string(dir.path().join("eval.json")).unwrap(), out.result.to_json().unwrap());
    let saved = RunConfig::load(&dir.path().join("config.txt")).unwrap();
    assert_eq!(saved.to_kv(), RunConfig::from_kv(TINY_RUN).unwrap().to_kv());
}
