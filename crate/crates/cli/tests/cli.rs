use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use tagdrive_core::persist::{load_codedb, load_registry};

fn tagdrive(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagdrive"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn pairs(o: &Output) -> Vec<(String, String)> {
    stdout(o)
        .lines()
        .map(|l| {
            let (a, b) = l.split_once('\t').unwrap();
            (a.to_owned(), b.to_owned())
        })
        .collect()
}

struct Server(Child, String);

impl Server {
    fn start(cmd: &mut Command) -> Self {
        let mut child = cmd
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let url = line
            .trim()
            .strip_prefix("listening on ")
            .expect("listening line")
            .to_owned();
        Server(child, url)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(tagdrive(&[]).status.code(), Some(2));
    assert_eq!(
        tagdrive(&["provision", "--width", "4"]).status.code(),
        Some(2)
    );
    assert_eq!(
        tagdrive(&["activate", "--serial", "TD-1", "--secret", "X", "--db", "d.json"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(tagdrive(&["bogus"]).status.code(), Some(2));
}

#[test]
fn provision_zero_leaves_registry_alone() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("registry.json");
    let out = tagdrive(&[
        "provision",
        "-n",
        "0",
        "--width",
        "96",
        "--registry",
        s(&reg),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    assert!(!reg.exists());

    let out = tagdrive(&[
        "provision",
        "-n",
        "2",
        "--width",
        "96",
        "--registry",
        s(&reg),
        "--seed",
        "1",
    ]);
    assert_eq!(pairs(&out).len(), 2);
    let before = std::fs::read(&reg).unwrap();
    let out = tagdrive(&[
        "provision",
        "-n",
        "0",
        "--width",
        "96",
        "--registry",
        s(&reg),
    ]);
    assert!(out.status.success() && out.stdout.is_empty());
    assert_eq!(std::fs::read(&reg).unwrap(), before);
}

#[test]
fn provision_thousand_unique_serials() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("registry.json");
    let out = tagdrive(&[
        "provision",
        "-n",
        "1000",
        "--width",
        "96",
        "--registry",
        s(&reg),
    ]);
    assert!(out.status.success());
    let pairs = pairs(&out);
    let serials: BTreeSet<_> = pairs.iter().map(|(a, _)| a.clone()).collect();
    assert_eq!(serials.len(), 1000);
    let registry = load_registry(&reg).unwrap();
    assert_eq!(registry.len(), 1000);
    assert!(registry
        .iter()
        .all(|(serial, _)| serials.contains(serial.as_str())));
    // secrets are printed, never written
    let text = std::fs::read_to_string(&reg).unwrap();
    assert!(pairs
        .iter()
        .all(|(_, secret)| !text.contains(secret.as_str())));
}

#[test]
fn provision_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("registry.json");
    let r = s(&reg);
    assert_eq!(
        tagdrive(&[
            "provision",
            "-n",
            "2",
            "--width",
            "4",
            "--registry",
            r,
            "--codes",
            "1000"
        ])
        .status
        .code(),
        Some(3)
    );
    assert_eq!(
        tagdrive(&[
            "provision",
            "-n",
            "1",
            "--width",
            "4",
            "--registry",
            r,
            "--codes",
            "10"
        ])
        .status
        .code(),
        Some(3)
    );
    assert_eq!(
        tagdrive(&[
            "provision",
            "-n",
            "1",
            "--width",
            "4",
            "--registry",
            r,
            "--band",
            "VHF"
        ])
        .status
        .code(),
        Some(3)
    );
    assert!(
        tagdrive(&["provision", "-n", "1", "--width", "4", "--registry", r])
            .status
            .success()
    );
    assert_eq!(
        tagdrive(&["provision", "-n", "1", "--width", "8", "--registry", r])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn activate_from_registry_file() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("registry.json");
    let db = dir.path().join("codedb.json");
    let discs = dir.path().join("discs");
    let out = tagdrive(&[
        "provision",
        "-n",
        "4",
        "--width",
        "4",
        "--registry",
        s(&reg),
        "--codes",
        "1000,1001,1010,1011",
        "--discs",
        s(&discs),
        "--seed",
        "5",
    ]);
    assert!(out.status.success());
    let pairs = pairs(&out);

    let (serial, secret) = &pairs[0];
    let mut wrong = secret.clone().into_bytes();
    wrong[0] = if wrong[0] == b'A' { b'B' } else { b'A' };
    let wrong = String::from_utf8(wrong).unwrap();
    let out = tagdrive(&[
        "activate",
        "--serial",
        serial,
        "--secret",
        &wrong,
        "--db",
        s(&db),
        "--registry",
        s(&reg),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!db.exists());

    for (serial, secret) in &pairs {
        let out = tagdrive(&[
            "activate",
            "--serial",
            serial,
            "--secret",
            secret,
            "--db",
            s(&db),
            "--registry",
            s(&reg),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let once = std::fs::read(&db).unwrap();
    let (serial, secret) = &pairs[2];
    assert!(tagdrive(&[
        "activate",
        "--serial",
        serial,
        "--secret",
        secret,
        "--db",
        s(&db),
        "--registry",
        s(&reg)
    ])
    .status
    .success());
    assert_eq!(std::fs::read(&db).unwrap(), once);

    let codes: Vec<String> = load_codedb(&db)
        .unwrap()
        .codes()
        .iter()
        .map(|c| c.canonical())
        .collect();
    assert_eq!(codes, ["0b1000", "0b1001", "0b1010", "0b1011"]);
    assert_eq!(std::fs::read_dir(&discs).unwrap().count(), 4);
}

#[test]
fn serve_and_activate_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("registry.json");
    let db = dir.path().join("codedb.json");
    let out = tagdrive(&[
        "provision",
        "-n",
        "3",
        "--width",
        "96",
        "--registry",
        s(&reg),
    ]);
    let pairs = pairs(&out);
    let server = Server::start(
        Command::new(env!("CARGO_BIN_EXE_tagdrive"))
            .arg("serve")
            .env("TAGDRIVE_REGISTRY", &reg)
            .env("TAGDRIVE_BIND", "127.0.0.1:0"),
    );
    for (serial, secret) in &pairs {
        let out = tagdrive(&[
            "activate",
            "--serial",
            serial,
            "--secret",
            secret,
            "--db",
            s(&db),
            "--url",
            &server.1,
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(stdout(&out), format!("activated {serial}\n"));
    }
    assert_eq!(load_codedb(&db).unwrap().len(), 3);
    let out = tagdrive(&[
        "activate",
        "--serial",
        "TD-NONE-NONE-NONE",
        "--secret",
        &pairs[0].1,
        "--db",
        s(&db),
        "--url",
        &server.1,
    ]);
    assert_eq!(out.status.code(), Some(3));
    drop(server);
}

#[test]
fn unreachable_service_exits_4() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("codedb.json");
    let out = tagdrive(&[
        "activate",
        "--serial",
        "TD-0001",
        "--secret",
        "ABCDEFGHJKLMNPQR",
        "--db",
        s(&db),
        "--url",
        &url,
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn serve_with_corrupt_registry_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("registry.json");
    std::fs::write(&reg, "[]").unwrap();
    assert_eq!(
        tagdrive(&["serve", "--registry", s(&reg), "--bind", "127.0.0.1:0"])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn run_empty_and_malformed_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("codedb.json"),
        r#"{"version":1,"width":4,"entries":[]}"#,
    )
    .unwrap();
    let sc = dir.path().join("empty.json");
    std::fs::write(&sc, r#"{"seed":1,"db":"codedb.json","events":[]}"#).unwrap();
    let prefix = dir.path().join("out");
    let out = tagdrive(&["run", s(&sc), "-o", s(&prefix)]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("out.csv")).unwrap(),
        "t_ms,state,run,eject\n0,Idle,0,0\n"
    );
    assert!(dir.path().join("out.vcd").exists());

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"seed":1,"db":"codedb.json","events":[{"t_ms":5,"action":"remove"},{"t_ms":5,"action":"remove"}]}"#,
    )
    .unwrap();
    assert_eq!(
        tagdrive(&["run", s(&bad), "-o", s(&prefix)]).status.code(),
        Some(3)
    );
    std::fs::write(&bad, "{").unwrap();
    assert_eq!(
        tagdrive(&["run", s(&bad), "-o", s(&prefix)]).status.code(),
        Some(3)
    );
    assert_eq!(
        tagdrive(&["run", s(&dir.path().join("none.json")), "-o", s(&prefix)])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn seal_and_open_bind_to_the_tag() {
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("movie.bin");
    let image = dir.path().join("movie.tdimg");
    let back = dir.path().join("back.bin");
    std::fs::write(&plain, vec![42u8; 10_000]).unwrap();
    let code = "00112233445566778899aabb";
    assert!(tagdrive(&[
        "seal",
        "--code",
        code,
        "--serial",
        "TD-MOVIE",
        "-i",
        s(&plain),
        "-o",
        s(&image)
    ])
    .status
    .success());
    assert!(tagdrive(&[
        "open",
        "--code",
        code,
        "--serial",
        "TD-MOVIE",
        "-i",
        s(&image),
        "-o",
        s(&back)
    ])
    .status
    .success());
    assert_eq!(
        std::fs::read(&back).unwrap(),
        std::fs::read(&plain).unwrap()
    );

    // a copied image on another disc, or without the tag, yields nothing
    std::fs::remove_file(&back).unwrap();
    let other = "00112233445566778899aaba";
    assert_eq!(
        tagdrive(&[
            "open",
            "--code",
            other,
            "--serial",
            "TD-MOVIE",
            "-i",
            s(&image),
            "-o",
            s(&back)
        ])
        .status
        .code(),
        Some(3)
    );
    assert_eq!(
        tagdrive(&[
            "open",
            "--code",
            code,
            "--serial",
            "TD-MOVIF",
            "-i",
            s(&image),
            "-o",
            s(&back)
        ])
        .status
        .code(),
        Some(3)
    );
    assert!(!back.exists());
    assert_eq!(
        tagdrive(&["open", "--code", code, "-i", s(&image), "-o", s(&back)])
            .status
            .code(),
        Some(2)
    );
}
