use giuda_core::datagen::{gen_dataset, DatasetManifest, DomainProfile};

fn bytes(m: &DatasetManifest) -> Vec<Vec<u8>> {
    m.entries
        .iter()
        .map(|(p, _)| std::fs::read(m.root.join(p)).unwrap())
        .collect()
}

#[test]
fn default_benchmark_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = gen_dataset(
        3,
        100,
        &DomainProfile::source(),
        &DomainProfile::target(),
        11,
        dir.path(),
    )
    .unwrap();
    assert_eq!((s.len(), t.len()), (300, 300));
    for m in [&s, &t] {
        let back = DatasetManifest::read(&m.manifest_path()).unwrap();
        assert_eq!(&back, m);
        assert_eq!(back.class_histogram(), vec![100, 100, 100]);
    }
    let src = s.load_clouds().unwrap();
    let tgt = t.load_clouds().unwrap();
    assert!(src.iter().all(|c| c.len() == 1024));
    // 30% occlusion of 256 points keeps ceil(0.7 * 256).
    assert!(tgt.iter().all(|c| c.len() == 180));
    for (c, (_, l)) in tgt.iter().zip(&t.entries) {
        assert_eq!(c.label(), Some(*l));
    }
}

#[test]
fn same_seed_same_bytes_and_disjoint_domains() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let p = DomainProfile::source();
    let (s1, t1) = gen_dataset(2, 5, &p, &p, 4, a.path()).unwrap();
    let (s2, t2) = gen_dataset(2, 5, &p, &p, 4, b.path()).unwrap();
    assert_eq!(bytes(&s1), bytes(&s2));
    assert_eq!(bytes(&t1), bytes(&t2));
    assert_eq!(
        std::fs::read(s1.manifest_path()).unwrap(),
        std::fs::read(s2.manifest_path()).unwrap()
    );
    // Identical profiles, yet each domain draws from its own stream.
    assert!(bytes(&s1).iter().zip(bytes(&t1)).all(|(x, y)| *x != y));
    let c = tempfile::tempdir().unwrap();
    let (s3, _) = gen_dataset(2, 5, &p, &p, 5, c.path()).unwrap();
    assert_ne!(bytes(&s1), bytes(&s3));
}

#[test]
fn rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let p = DomainProfile::source();
    assert!(gen_dataset(4, 5, &p, &p, 0, dir.path()).is_err());
    assert!(gen_dataset(1, 5, &p, &p, 0, dir.path()).is_err());
    assert!(gen_dataset(3, 0, &p, &p, 0, dir.path()).is_err());
    let bad = DomainProfile {
        occlusion: Some(1.0),
        ..p
    };
    assert!(gen_dataset(3, 1, &p, &bad, 0, dir.path()).is_err());
}

#[test]
fn manifest_with_missing_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = DomainProfile::source();
    let (s, _) = gen_dataset(2, 2, &p, &p, 0, dir.path()).unwrap();
    std::fs::remove_file(s.root.join(&s.entries[1].0)).unwrap();
    assert!(DatasetManifest::read(&s.manifest_path()).is_err());
}
