use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;

use chrono::{TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tagdrive_core::activation::{
    activate, provision_disc, ProvisionedDisc, PurchaseSecret, SerialRegistry,
};
use tagdrive_core::model::{CodeDatabase, FrequencyBand, VisibleSerial};
use tagdrive_core::persist::{load_registry, save_registry};
use tagdrive_service::{serve, serve_file, ActivationClient, ClientError, ServiceError};

fn seeded_registry(
    n: usize,
    width: u32,
) -> (SerialRegistry, Vec<(ProvisionedDisc, PurchaseSecret)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut reg = SerialRegistry::new(width).unwrap();
    let discs = (0..n)
        .map(|_| {
            let secret = PurchaseSecret::generate(&mut rng);
            let at = Utc.timestamp_opt(1_700_000_000, 0).unwrap();
            (
                provision_disc(&mut reg, &secret, FrequencyBand::Hf13_56MHz, &mut rng, at).unwrap(),
                secret,
            )
        })
        .collect();
    (reg, discs)
}

fn raw_get(url: &str) -> (u16, String) {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let mut res = agent.get(url).call().unwrap();
    (
        res.status().as_u16(),
        res.body_mut().read_to_string().unwrap(),
    )
}

#[test]
fn healthz_and_lookup() {
    let (reg, discs) = seeded_registry(3, 96);
    let svc = serve(reg, "127.0.0.1:0", None).unwrap();
    let client = ActivationClient::new(&svc.url());
    client.healthz().unwrap();
    assert_eq!(
        raw_get(&format!("{}/v1/healthz", svc.url())),
        (200, "ok".into())
    );

    let (disc, secret) = &discs[0];
    let blob = client.fetch_blob(&disc.serial).unwrap();
    assert_eq!(blob, disc.blob);
    let mut db = CodeDatabase::new(96).unwrap();
    let code = activate(&mut db, &blob, secret, &disc.serial, Utc::now()).unwrap();
    assert_eq!(&code, disc.tag.code());

    let unknown = VisibleSerial::new("TD-NOPE-NOPE-NOPE").unwrap();
    assert!(matches!(
        client.fetch_blob(&unknown),
        Err(ClientError::SerialUnknown)
    ));
    let (status, body) = raw_get(&format!("{}/v1/blobs/not%20a%20serial", svc.url()));
    assert_eq!(status, 404);
    assert_eq!(body, r#"{"error":"SerialUnknown"}"#);
    svc.shutdown().unwrap();
}

#[test]
fn provision_over_the_wire() {
    let (reg, _) = seeded_registry(0, 12);
    let svc = serve(reg, "127.0.0.1:0", None).unwrap();
    let client = ActivationClient::new(&svc.url());
    let p = client.provision(12).unwrap();
    assert_eq!(p.secret.len(), 16);
    let serial = VisibleSerial::new(p.serial.clone()).unwrap();
    let blob = client.fetch_blob(&serial).unwrap();
    assert_eq!(blob.to_base64(), p.blob);
    let secret = PurchaseSecret::new(&p.secret).unwrap();
    let mut db = CodeDatabase::new(12).unwrap();
    activate(&mut db, &blob, &secret, &serial, Utc::now()).unwrap();
    assert_eq!(db.len(), 1);

    let err = client.provision(96).unwrap_err();
    assert!(
        matches!(err, ClientError::Protocol(ref m) if m.contains("WidthMismatch")),
        "{err}"
    );
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let mut res = agent
        .post(format!("{}/v1/provision", svc.url()))
        .header("content-type", "application/json")
        .send("{\"width\":\"wide\"}")
        .unwrap();
    assert_eq!(res.status().as_u16(), 400);
    assert_eq!(
        res.body_mut().read_to_string().unwrap(),
        r#"{"error":"BadRequest"}"#
    );
}

#[test]
fn concurrent_lookups_and_provisions_stay_consistent() {
    let (reg, discs) = seeded_registry(20, 96);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("registry.json");
    save_registry(&path, &reg).unwrap();
    let svc = serve_file(&path, "127.0.0.1:0").unwrap();
    let url = svc.url();
    let discs = Arc::new(discs);

    let readers: Vec<_> = (0..100)
        .map(|i| {
            let url = url.clone();
            let discs = discs.clone();
            thread::spawn(move || {
                let (disc, _) = &discs[i % discs.len()];
                let blob = ActivationClient::new(&url)
                    .fetch_blob(&disc.serial)
                    .unwrap();
                (disc.serial.clone(), blob)
            })
        })
        .collect();
    let writers: Vec<_> = (0..10)
        .map(|_| {
            let url = url.clone();
            thread::spawn(move || ActivationClient::new(&url).provision(96).unwrap())
        })
        .collect();

    // request log
    let lookups: Vec<_> = readers.into_iter().map(|t| t.join().unwrap()).collect();
    let provisions: Vec<_> = writers.into_iter().map(|t| t.join().unwrap()).collect();

    for (serial, blob) in &lookups {
        assert_eq!(&reg.get(serial).unwrap().blob, blob);
    }
    let live = svc.state().snapshot();
    assert_eq!(live.len(), 30);
    let mut expected: BTreeMap<String, String> = reg
        .iter()
        .map(|(s, e)| (s.to_string(), e.blob.to_base64()))
        .collect();
    for p in &provisions {
        assert!(
            expected.insert(p.serial.clone(), p.blob.clone()).is_none(),
            "duplicate serial"
        );
        let secret = PurchaseSecret::new(&p.secret).unwrap();
        let serial = VisibleSerial::new(p.serial.clone()).unwrap();
        live.get(&serial)
            .unwrap()
            .blob
            .open(&serial, &secret, 96)
            .unwrap();
    }
    let actual: BTreeMap<String, String> = live
        .iter()
        .map(|(s, e)| (s.to_string(), e.blob.to_base64()))
        .collect();
    assert_eq!(actual, expected);
    svc.shutdown().unwrap();
    assert_eq!(load_registry(&path).unwrap(), *live);
}

/// No response body and no server file may carry a tag code in the clear.
#[test]
fn plaintext_codes_never_leave_the_vendor() {
    let (reg, discs) = seeded_registry(10, 96);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("registry.json");
    save_registry(&path, &reg).unwrap();
    let svc = serve_file(&path, "127.0.0.1:0").unwrap();
    let client = ActivationClient::new(&svc.url());

    let mut codes: Vec<Vec<u8>> = discs
        .iter()
        .map(|(d, _)| d.tag.code().as_bytes().to_vec())
        .collect();
    let mut produced: Vec<u8> = Vec::new();
    for (d, _) in &discs {
        produced.extend(
            raw_get(&format!("{}/v1/blobs/{}", svc.url(), d.serial))
                .1
                .bytes(),
        );
    }
    for _ in 0..5 {
        let p = client.provision(96).unwrap();
        let secret = PurchaseSecret::new(&p.secret).unwrap();
        let serial = VisibleSerial::new(p.serial.clone()).unwrap();
        let blob = client.fetch_blob(&serial).unwrap();
        codes.push(blob.open(&serial, &secret, 96).unwrap().as_bytes().to_vec());
        produced.extend(serde_json::to_vec(&p).unwrap());
    }
    svc.shutdown().unwrap();
    produced.extend(std::fs::read(&path).unwrap());

    for code in &codes {
        let raw = code.as_slice();
        let lower: String = code.iter().map(|b| format!("{b:02x}")).collect();
        let upper = lower.to_uppercase();
        for needle in [raw, lower.as_bytes(), upper.as_bytes()] {
            assert!(
                !produced.windows(needle.len()).any(|w| w == needle),
                "code leaked"
            );
        }
    }
}

#[test]
fn bind_and_storage_failures() {
    let (reg, _) = seeded_registry(0, 96);
    let first = serve(reg.clone(), "127.0.0.1:0", None).unwrap();
    let taken = first.local_addr().to_string();
    assert!(matches!(
        serve(reg, &taken, None),
        Err(ServiceError::BindFailure { .. })
    ));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("registry.json");
    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(
        serve_file(&path, "127.0.0.1:0"),
        Err(ServiceError::StorageCorrupt(_))
    ));
}

#[test]
fn unreachable_service() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = ActivationClient::new(&format!("http://{addr}"));
    assert!(matches!(client.healthz(), Err(ClientError::Unreachable(_))));
}
