mod common;

use codeaudit_client::api::{ApplyCode, CreateCode};
use codeaudit_client::AlertFilter;
use codeaudit_server::store::{RelationalState, Store};
use codeaudit_server::ServerConfig;
use common::{mock_config, sentence, start, INTERVIEW};
use reqwest::StatusCode;

async fn seeded(server: &common::TestServer, c: &codeaudit_client::Client) -> uuid::Uuid {
    let p = c
        .create_project("study", Some(serde_json::json!({"mmr_lambda": 0.6})))
        .await
        .unwrap();
    let doc = c.upload_document(p.id, "t1", INTERVIEW).await.unwrap();
    let x = c
        .create_code(
            p.id,
            &CreateCode {
                name: "x".into(),
                definition: Some("first".into()),
                ..Default::default()
            },
        )
        .await
        .unwrap();
    let y = c
        .create_code(
            p.id,
            &CreateCode {
                name: "y".into(),
                ..Default::default()
            },
        )
        .await
        .unwrap();
    for n in 0..5 {
        let (s, e) = sentence(n);
        let code_ids = if n % 2 == 0 {
            vec![x.id]
        } else {
            vec![y.id, x.id]
        };
        c.apply_code(
            p.id,
            &ApplyCode {
                document_id: doc.id,
                char_start: s,
                char_end: e,
                code_ids,
            },
        )
        .await
        .unwrap();
        server.idle().await;
    }
    p.id
}

#[tokio::test]
async fn export_then_import_reproduces_the_project() {
    let server = start(mock_config(32)).await;
    let ana = server.user("ana").await;
    let pid = seeded(&server, &ana).await;
    let archive = ana.export(pid).await.unwrap();
    assert!(archive.starts_with(&[0x1f, 0x8b]), "gzip magic");

    let ben = server.user("ben").await;
    let imported = ben.import(archive.clone()).await.unwrap();
    assert_ne!(imported.id, pid);
    assert_eq!(imported.owner, ben.me().await.unwrap().id);
    assert_eq!(imported.settings, ana.project(pid).await.unwrap().settings);

    let (docs_a, docs_b) = (
        ana.documents(pid).await.unwrap(),
        ben.documents(imported.id).await.unwrap(),
    );
    assert_eq!(docs_a.len(), docs_b.len());
    assert_eq!(docs_a[0].body, docs_b[0].body);
    assert_ne!(docs_a[0].id, docs_b[0].id);

    let names = |codes: Vec<codeaudit_client::api::CodeRecord>| {
        let mut v: Vec<_> = codes.into_iter().map(|c| (c.name, c.definition)).collect();
        v.sort();
        v
    };
    assert_eq!(
        names(ana.codes(pid).await.unwrap()),
        names(ben.codes(imported.id).await.unwrap())
    );

    let spans = |segs: Vec<codeaudit_client::api::SegmentRecord>| {
        let mut v: Vec<_> = segs
            .iter()
            .map(|s| (s.char_start, s.char_end, s.code_ids.len()))
            .collect();
        v.sort();
        v
    };
    let segs_b = ben.segments(imported.id).await.unwrap();
    assert_eq!(
        spans(ana.segments(pid).await.unwrap()),
        spans(segs_b.clone())
    );
    let ben_id = ben.me().await.unwrap().id;
    assert!(
        segs_b.iter().all(|s| s.coder_id == ben_id),
        "exporter's coding belongs to the importer"
    );

    let scores_a = ana.scores(pid, None).await.unwrap();
    let scores_b = ben.scores(imported.id, None).await.unwrap();
    assert_eq!(scores_a.len(), scores_b.len());
    for (a, b) in scores_a.iter().zip(&scores_b) {
        assert_eq!(a.final_score, b.final_score);
        assert_eq!(a.band, b.band);
        assert_ne!(a.id, b.id);
    }
    assert_eq!(
        ana.alerts(pid, &AlertFilter::default())
            .await
            .unwrap()
            .len(),
        ben.alerts(imported.id, &AlertFilter::default())
            .await
            .unwrap()
            .len()
    );
    let x_b = ben
        .codes(imported.id)
        .await
        .unwrap()
        .into_iter()
        .find(|c| c.name == "x")
        .unwrap();
    let x_a = ana
        .codes(pid)
        .await
        .unwrap()
        .into_iter()
        .find(|c| c.name == "x")
        .unwrap();
    let (ra, rb) = (
        ana.reflections(pid, x_a.id).await.unwrap(),
        ben.reflections(imported.id, x_b.id).await.unwrap(),
    );
    assert_eq!(ra.len(), rb.len());
    assert!(!rb.is_empty());

    // embeddings came along, so the importer's dashboard has centroids
    let dash = ben.dashboard(imported.id).await.unwrap();
    assert!(dash.overlap.values.iter().flatten().all(Option::is_some));

    // the source is untouched and a second import is independent
    let again = ben.import(archive).await.unwrap();
    assert_ne!(again.id, imported.id);
    assert_eq!(ana.segments(pid).await.unwrap().len(), 5);
}

#[tokio::test]
async fn import_rejects_garbage() {
    let server = start(mock_config(32)).await;
    let c = server.user("ana").await;
    let err = c
        .import(b"definitely not an archive".to_vec())
        .await
        .unwrap_err();
    assert_eq!(err.status(), Some(StatusCode::UNPROCESSABLE_ENTITY));
}

#[tokio::test]
async fn archives_from_a_different_embedding_size_are_refused() {
    let server = start(mock_config(32)).await;
    let c = server.user("ana").await;
    let pid = seeded(&server, &c).await;
    let archive = c.export(pid).await.unwrap();
    let other = start(mock_config(48)).await;
    let d = other.user("dan").await;
    assert_eq!(
        d.import(archive).await.unwrap_err().status(),
        Some(StatusCode::UNPROCESSABLE_ENTITY)
    );
}

#[tokio::test]
async fn a_restarted_server_recovers_everything() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServerConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..mock_config(32)
    };
    let (pid, before_state, scores, reflections_before);
    {
        let server = start(config.clone()).await;
        let c = server.user("ana").await;
        pid = seeded(&server, &c).await;
        scores = c.scores(pid, None).await.unwrap();
        let x = c
            .codes(pid)
            .await
            .unwrap()
            .into_iter()
            .find(|c| c.name == "x")
            .unwrap();
        reflections_before = (x.id, c.reflections(pid, x.id).await.unwrap());
        before_state = server.state.store.read(|s| s.clone());
    }
    let server = start(config).await;
    let mut c = server.client();
    c.login("ana", "correct horse battery").await.unwrap();
    assert_eq!(server.state.store.read(|s| s.clone()), before_state);
    assert_eq!(c.scores(pid, None).await.unwrap(), scores);
    assert_eq!(
        c.reflections(pid, reflections_before.0).await.unwrap(),
        reflections_before.1
    );
    // the history file alone rebuilds the same state
    let store = Store::open(dir.path().join("history.jsonl")).unwrap();
    let replayed = RelationalState::replay(&store.history()).unwrap();
    assert_eq!(replayed, before_state);
}

#[tokio::test]
async fn credentials_never_reach_disk() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServerConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..mock_config(32)
    };
    let server = start(config).await;
    let c = server.user("ana").await;
    seeded(&server, &c).await;
    let token = c.token().unwrap().to_string();
    for entry in walk(dir.path()) {
        let text = String::from_utf8_lossy(&std::fs::read(&entry).unwrap()).into_owned();
        assert!(
            !text.contains("correct horse battery"),
            "{}",
            entry.display()
        );
        assert!(!text.contains(&token), "{}", entry.display());
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
