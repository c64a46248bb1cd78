use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vamidi::midi::{write_midi, MidiPiece, NoteEvent, DEFAULT_TEMPO_US_PER_BEAT};

fn vamidi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vamidi")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vamidi(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, pairs: usize) {
    ok(&["synth", "--out-dir", p(dir), "--pairs", &pairs.to_string(), "--seed", "2"]);
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(vamidi(&[]).status.code(), Some(1));
    assert_eq!(vamidi(&["pair", "--bogus"]).status.code(), Some(1));
    assert_eq!(vamidi(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let out = vamidi(&["train", "--config", p(&bad), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ConfigError::Parse"));
}

#[test]
fn pairing_matches_brute_force_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 4);
    let midis = [("a", 2.0, 2.0), ("b", 8.0, 8.0), ("c", 5.0, 1.0)];
    let images = [("w", 2.5, 2.0), ("x", 7.0, 7.5), ("y", 5.0, 2.0), ("z", 1.0, 9.0)];
    let catalog = |rows: &[(&str, f64, f64)], dir: &str, ext: &str| {
        let mut s = String::from("id,path,valence,arousal\n");
        for (i, (id, v, a)) in rows.iter().enumerate() {
            s.push_str(&format!("{id},{dir}/{}{i:02}.{ext},{v},{a}\n", &dir[..1]));
        }
        s
    };
    fs::write(d.join("toy_m.csv"), catalog(&midis, "midis", "mid")).unwrap();
    fs::write(d.join("toy_i.csv"), catalog(&images, "images", "png")).unwrap();
    let (toy_m, toy_i) = (d.join("toy_m.csv"), d.join("toy_i.csv"));
    let run = |out: &str, extra: &[&str]| {
        let m = d.join(out);
        let mut args = vec!["pair", "--midis", p(&toy_m), "--images", p(&toy_i), "--out", p(&m)];
        args.extend_from_slice(extra);
        let stdout = ok(&args);
        (fs::read(&m).unwrap(), stdout)
    };
    let (first, stdout) = run("a.json", &[]);
    assert!(stdout.contains("pairs: 3"));
    let (second, _) = run("b.json", &[]);
    assert_eq!(first, second);

    let json: serde_json::Value = serde_json::from_slice(&first).unwrap();
    for (pair, (mid, mv, ma)) in json["pairs"].as_array().unwrap().iter().zip(&midis) {
        let (best, d2) = images
            .iter()
            .map(|(id, v, a)| (id, (v - mv).powi(2) + (a - ma).powi(2)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        assert_eq!(pair["midi_id"], *mid);
        assert_eq!(pair["image_id"], **best);
        assert!((pair["similarity"].as_f64().unwrap() - 1.0 / d2.sqrt()).abs() < 1e-12);
    }

    let (split, stdout) = run("s.json", &["--split", "2,1,0", "--seed", "4"]);
    assert!(stdout.contains("split: train 2 test 1 val 0"));
    assert_eq!(run("s2.json", &["--split", "2,1,0", "--seed", "4"]).0, split);

    let out = vamidi(&[
        "pair", "--midis", p(&d.join("toy_m.csv")), "--images", p(&d.join("toy_i.csv")), "--out", p(&d.join("x.json")),
        "--split", "5,0,0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PairingError::CountMismatch"));
}

#[test]
fn train_then_generate_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 2);
    let text = fs::read_to_string(d.join("config.toml")).unwrap();
    let text = text.replacen("epochs = 15", "epochs = 1", 1);
    fs::write(d.join("config.toml"), text).unwrap();
    let run = d.join("run");
    let stdout = ok(&["train", "--config", p(&d.join("config.toml")), "--out-dir", p(&run)]);
    assert!(stdout.contains("epoch 1 "));
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2);
    assert!(loss.starts_with("epoch,l_cc,l_va,l_total\n1,"));
    for f in ["model.ckpt", "manifest.json", "effective_config.toml", "va_predictor.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let ckpt = run.join("model.ckpt");
    let image = d.join("images").join("i00.png");
    let gen = |name: &str, extra: &[&str]| {
        let out = d.join(name);
        let mut args = vec!["generate", "--image", p(&image), "--checkpoint", p(&ckpt), "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        fs::read(out).unwrap()
    };
    assert_eq!(gen("g1.mid", &["--strategy", "greedy"]), gen("g2.mid", &["--strategy", "greedy"]));
    let t = ["--strategy", "temperature", "--temperature", "1.2", "--seed", "3"];
    assert_eq!(gen("t1.mid", &t), gen("t2.mid", &t));
    assert!(gen("g3.mid", &["--max-len", "8"]).starts_with(b"MThd"));

    let out = vamidi(&[
        "generate", "--image", p(&image), "--checkpoint", p(&ckpt), "--out", p(&d.join("bad.mid")), "--max-len", "500",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tokenize_and_pretrain_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 5);
    let tokens = d.join("tok").join("tokens.jsonl");
    ok(&["tokenize", "--midis", p(&d.join("midis.csv")), "--out", p(&tokens)]);
    let lines: Vec<serde_json::Value> =
        fs::read_to_string(&tokens).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["tokens"][0], 1);
    assert!(d.join("tok").join("effective_config.toml").exists());

    let va = d.join("va").join("va.ckpt");
    let stdout = ok(&["pretrain-va", "--midis", p(&d.join("midis.csv")), "--out", p(&va)]);
    assert!(stdout.contains("heldout_mae"));
    assert!(va.exists() && d.join("va").join("va.report.json").exists());
}

fn piece(notes: &[(u8, u64, u64)]) -> Vec<u8> {
    let notes = notes.iter().map(|&(p, s, d)| NoteEvent::new(p, s, d, 80).unwrap()).collect();
    write_midi(&MidiPiece::new(480, DEFAULT_TEMPO_US_PER_BEAT, notes).unwrap())
}

#[test]
fn metrics_on_crafted_pieces() {
    let dir = tempfile::tempdir().unwrap();
    let midi = dir.path().join("set");
    fs::create_dir(&midi).unwrap();
    // two notes sounding together for a beat, then one note held through bar two
    fs::write(midi.join("a.mid"), piece(&[(60, 0, 480), (64, 0, 480), (67, 1920, 1920)])).unwrap();
    // downbeat onsets in two full bars, never overlapping
    fs::write(midi.join("b.mid"), piece(&[(60, 0, 120), (62, 1920, 1920)])).unwrap();
    // a single bar: groove is undefined
    fs::write(midi.join("c.mid"), piece(&[(60, 0, 120)])).unwrap();
    let out = dir.path().join("report").join("metrics.csv");
    let stdout = ok(&["metrics", "--midi-dir", p(&midi), "--out", p(&out)]);
    assert!(stdout.contains("scored 2 of 3 pieces"));
    let csv = fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["path", "polyphony_rate", "pitch_entropy", "groove_consistency", "music_quality_loss"]);
    let num = |s: &str| s.parse::<f64>().unwrap();
    let (a, b, c) = (&rows[1], &rows[2], &rows[3]);
    assert_eq!(a[0], "a.mid");
    assert!((num(a[1]) - 0.2).abs() < 1e-12);
    assert!((num(a[2]) - 3f64.log2()).abs() < 1e-12);
    assert!((num(a[3]) - 1.0).abs() < 1e-12);
    assert!((num(b[1]) - 0.0).abs() < 1e-12);
    assert!((num(b[2]) - 1.0).abs() < 1e-12);
    assert!((num(b[3]) - 1.0).abs() < 1e-12);
    assert_eq!(&c[1..], ["NA", "NA", "NA", "NA"]);
    assert!(out.with_extension("md").exists());
}

#[test]
fn gradcheck_passes_on_a_reduced_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.toml");
    fs::write(
        &cfg,
        "[model]\nencoder_blocks = 1\ndecoder_blocks = 1\nallow_reduced = true\nmodel_dim = 8\nhead_count = 2\n\
         ff_dim = 8\nmax_len = 16\nimage_extractor = \"precomputed\"\n\n[generate]\nmax_len = 16\n\n\
         [train]\nva_loss_mode = \"soft\"\n",
    )
    .unwrap();
    let report = dir.path().join("out").join("grad.json");
    let stdout = ok(&["gradcheck", "--config", p(&cfg), "--entries", "6", "--out", p(&report)]);
    assert!(stdout.contains("worst relative error"));
    assert!(!stdout.contains("FAIL"));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(json["blocks"].as_array().unwrap().len() > 10);
}

#[test]
fn ablation_writes_a_table_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 2);
    let text = fs::read_to_string(d.join("config.toml")).unwrap();
    let text = text
        .replacen("model_dim = 64", "model_dim = 16", 1)
        .replacen("ff_dim = 128", "ff_dim = 16", 1)
        .replacen("va_mode = \"soft\"", "va_mode = \"soft\"\nepochs = 1\n", 1)
        .replacen("encoder_blocks = [\n    2,\n    3,\n    4,\n]", "encoder_blocks = [2, 5]", 1)
        .replacen("decoder_blocks = [\n    0,\n    2,\n    3,\n]", "decoder_blocks = [0]", 1)
        .replacen("va_loss = [\n    true,\n    false,\n]", "va_loss = [false]", 1);
    fs::write(d.join("grid.toml"), text).unwrap();
    let out = d.join("abl");
    let stdout = ok(&["ablate", "--config-grid", p(&d.join("grid.toml")), "--out-dir", p(&out)]);
    assert!(stdout.contains("2 variants, 1 failed"), "{stdout}");
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("curves").join("enc2_dec0.csv").exists());
    assert!(fs::read_to_string(out.join("ablation.md")).unwrap().contains("enc5_dec0"));
}
