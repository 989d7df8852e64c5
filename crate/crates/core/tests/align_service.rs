mod common;

use synfaith::features::{check_alignment_service, AlignmentScorer, HttpAlignScorer};

#[test]
fn conforming_service_passes_every_check() {
    let stub = common::align_stub(0.0);
    let scorer = HttpAlignScorer::new(&stub.url).unwrap();
    let checks = check_alignment_service(&scorer);
    assert_eq!(checks.len(), 5);
    for c in &checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
    assert_eq!(scorer.name(), format!("http:{}", stub.url));
}

#[test]
fn out_of_range_scores_are_rejected() {
    let stub = common::align_stub(2.0);
    let scorer = HttpAlignScorer::new(&stub.url).unwrap();
    let err = scorer.score("Marie Curie", "Marie Curie was born in Warsaw.").unwrap_err();
    assert!(err.is_transport());
    let failed: Vec<_> = check_alignment_service(&scorer).into_iter().filter(|c| !c.passed).map(|c| c.name).collect();
    assert!(failed.contains(&"schema_and_range"), "{failed:?}");
}

#[test]
fn missing_service_fails_the_checks_without_panicking() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let scorer = HttpAlignScorer::new(&format!("http://127.0.0.1:{port}")).unwrap();
    assert!(check_alignment_service(&scorer).iter().all(|c| !c.passed));
}
