use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use nmt_core::data::Vocabulary;
use nmt_core::model::load_checkpoint;
use nmt_core::synthetic::{toy_pairs, ToySpec};
use nmt_core::train::greedy_translate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmt")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    /// Toy corpus, vocabularies and a briefly trained checkpoint.
    fn trained(iterations: usize) -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = toy_pairs(&ToySpec::default(), 600, &mut rng);
        let dev = toy_pairs(&ToySpec::default(), 50, &mut rng);
        let lines = |v: &[(Vec<String>, Vec<String>)], side: usize| -> String {
            v.iter().map(|p| if side == 0 { &p.0 } else { &p.1 }.join(" ") + "\n").collect()
        };
        fs::write(ws.path("train.src"), lines(&pairs, 0)).unwrap();
        fs::write(ws.path("train.tgt"), lines(&pairs, 1)).unwrap();
        fs::write(ws.path("dev.src"), lines(&dev, 0)).unwrap();
        fs::write(ws.path("dev.tgt"), lines(&dev, 1)).unwrap();
        for side in ["src", "tgt"] {
            let o = nmt(&["build-vocab", "--input", &ws.path(&format!("train.{side}")), "--output", &ws.path(&format!("{side}.vocab"))]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        let iters = iterations.to_string();
        let o = nmt(&[
            "--seed", "3", "train", "--src", &ws.path("train.src"), "--tgt", &ws.path("train.tgt"),
            "--src-vocab", &ws.path("src.vocab"), "--tgt-vocab", &ws.path("tgt.vocab"),
            "--output", &ws.path("model.ckpt"), "--embed", "12", "--hidden", "16", "--batch-size", "32",
            "--learning-rate", "0.003", "--max-iterations", &iters, "--validate-every", "100",
            "--dev-src", &ws.path("dev.src"), "--dev-tgt", &ws.path("dev.tgt"), "--log", &ws.path("train.log"),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        ws
    }

    fn translate(&self, input: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "translate".to_string(), "--checkpoint".into(), self.path("model.ckpt"), "--src-vocab".into(),
            self.path("src.vocab"), "--tgt-vocab".into(), self.path("tgt.vocab"), "--input".into(), input.into(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        nmt(&refs)
    }
}

#[test]
fn help_on_every_subcommand() {
    let o = nmt(&["--help"]);
    assert!(o.status.success());
    for sub in ["build-vocab", "build-dict", "train", "translate", "evaluate", "export-relevance", "serve-inspector"] {
        let o = nmt(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(nmt(&["--bogus"]).status.code(), Some(1));
    assert_eq!(nmt(&["translate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("x").to_string_lossy().into_owned();
    fs::write(&f, "s1 s2\n").unwrap();
    let o = nmt(&[
        "train", "--criterion", "mrt", "--src", &f, "--tgt", &f, "--src-vocab", &f, "--tgt-vocab", &f, "--output", &f,
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MLE"), "{}", stderr(&o));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt").to_string_lossy().into_owned();
    let o = nmt(&[
        "translate", "--checkpoint", &missing, "--src-vocab", &missing, "--tgt-vocab", &missing,
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = nmt(&["evaluate", "--hyp", &missing, "--ref", &missing]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "embed = 8\nno_such_key = 1\n").unwrap();
    let o = nmt(&["--config", cfg.to_str().unwrap(), "build-vocab", "--input", "x", "--output", "y"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn smoke_pipeline_and_cli_contracts() {
    let ws = Workspace::trained(200);
    assert!(fs::metadata(ws.path("model.ckpt.meta")).is_ok());
    let log = fs::read_to_string(ws.path("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
    assert!(log.lines().all(|l| l.split('\t').count() == 5));

    // translate + evaluate
    let o = ws.translate(&ws.path("dev.src"), &["--output", &ws.path("dev.hyp")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = nmt(&["evaluate", "--hyp", &ws.path("dev.hyp"), "--ref", &ws.path("dev.tgt")]);
    assert!(o.status.success());
    let line = String::from_utf8(o.stdout).unwrap();
    assert!(line.starts_with("BLEU = "), "{line}");

    // line count is preserved, empty lines included
    fs::write(ws.path("gaps.src"), "s1 s2\n\ns3\n\n\ns4 s5 s6\n").unwrap();
    let o = ws.translate(&ws.path("gaps.src"), &["--beam", "3"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 6);
    for i in [1, 3, 4] {
        assert_eq!(lines[i], "");
    }

    // threads do not change the output
    let a = ws.translate(&ws.path("dev.src"), &["--beam", "4"]);
    let b = ws.translate(&ws.path("dev.src"), &["--beam", "4", "--threads", "3"]);
    assert_eq!(a.stdout, b.stdout);

    // beam 1 agrees with greedy decoding on every sentence
    let o = ws.translate(&ws.path("dev.src"), &["--beam", "1", "--max-len", "100"]);
    let beam1 = String::from_utf8(o.stdout).unwrap();
    let model = load_checkpoint(Path::new(&ws.path("model.ckpt"))).unwrap();
    let sv = Vocabulary::load(Path::new(&ws.path("src.vocab"))).unwrap();
    let tv = Vocabulary::load(Path::new(&ws.path("tgt.vocab"))).unwrap();
    let src: Vec<Vec<usize>> = fs::read_to_string(ws.path("dev.src"))
        .unwrap()
        .lines()
        .map(|l| sv.encode_tokens(&l.split_whitespace().map(String::from).collect::<Vec<_>>()))
        .collect();
    assert_eq!(src.len(), 50);
    let greedy = greedy_translate(&model, &src, 100).unwrap();
    for (line, ids) in beam1.lines().zip(&greedy) {
        assert_eq!(line, tv.decode(ids));
    }

    // relevance export validates and covers every node
    let o = nmt(&[
        "export-relevance", "--checkpoint", &ws.path("model.ckpt"), "--src-vocab", &ws.path("src.vocab"),
        "--tgt-vocab", &ws.path("tgt.vocab"), "--src", "s1 s2", "--tgt", "t1 t2", "--output", &ws.path("doc.json"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("doc.json")).unwrap()).unwrap();
    assert_eq!(doc["nodes"].as_array().unwrap().len(), nmt_core::interpret::trace_node_count(2, 3));
    let o = nmt(&[
        "export-relevance", "--checkpoint", &ws.path("model.ckpt"), "--src-vocab", &ws.path("src.vocab"),
        "--tgt-vocab", &ws.path("tgt.vocab"), "--src", "s1", "--nodes", "bogus:0", "--output", &ws.path("bad.json"),
    ]);
    assert_eq!(o.status.code(), Some(2));

    // serve the exported document
    serve_round_trip(&ws.path("doc.json"));
}

fn http_get(addr: &str, path: &str) -> (String, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\n\r\n").unwrap();
    let mut text = String::new();
    s.read_to_string(&mut text).unwrap();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    (head.lines().next().unwrap().to_string(), body.to_string())
}

fn serve_round_trip(doc: &str) {
    let assets = tempfile::tempdir().unwrap();
    fs::write(assets.path().join("index.html"), "<html>inspector</html>").unwrap();
    fs::write(assets.path().join("app.js"), "console.log(1)").unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_nmt"))
        .args(["serve-inspector", "--document", doc, "--port", "0", "--assets"])
        .arg(assets.path())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();

    let (status, body) = http_get(&addr, "/api/health");
    assert!(status.contains("200"));
    assert_eq!(body, r#"{"ok":true}"#);
    let (_, body) = http_get(&addr, "/api/document");
    let served: serde_json::Value = serde_json::from_str(&body).unwrap();
    let on_disk: serde_json::Value = serde_json::from_str(&fs::read_to_string(doc).unwrap()).unwrap();
    assert_eq!(served, on_disk);
    assert_eq!(http_get(&addr, "/").1, "<html>inspector</html>");
    assert_eq!(http_get(&addr, "/app.js").1, "console.log(1)");
    assert!(http_get(&addr, "/nope.js").0.contains("404"));
    assert!(http_get(&addr, "/../secret").0.contains("404"));
    child.kill().unwrap();
    child.wait().unwrap();
}

#[test]
fn serve_rejects_an_invalid_document() {
    let dir = tempfile::tempdir().unwrap();
    let doc: PathBuf = dir.path().join("doc.json");
    fs::write(&doc, "{\"version\": 1}").unwrap();
    let o = nmt(&["serve-inspector", "--document", doc.to_str().unwrap(), "--port", "0"]);
    assert_eq!(o.status.code(), Some(2));
}
