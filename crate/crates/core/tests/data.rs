use seqintent_core::data::{
    generate_catalog, generate_users, latent_path, read_catalog, read_jsonl, read_latent_jsonl,
    split_dataset, tsr_bucket, write_catalog, write_jsonl, write_latent_jsonl, GeneratorConfig,
    UserSequence, DAY, MONTH, NUM_TSR, WEEK,
};
use seqintent_core::{Config, Error};

fn small() -> GeneratorConfig {
    GeneratorConfig {
        num_items: 120,
        num_users: 60,
        ..GeneratorConfig::default()
    }
}

fn generate(cfg: &GeneratorConfig) -> seqintent_core::data::GeneratedUsers {
    let catalog = generate_catalog(cfg.num_items, cfg.seed).unwrap();
    generate_users(&catalog, cfg).unwrap()
}

#[test]
fn generation_is_seeded() {
    let cfg = small();
    let a = generate(&cfg);
    let b = generate(&cfg);
    assert_eq!(a.sequences, b.sequences);
    assert_eq!(a.latent, b.latent);
    let c = generate(&GeneratorConfig { seed: 99, ..cfg });
    assert_ne!(a.sequences, c.sequences);
}

#[test]
fn generated_users_are_valid_and_aligned() {
    let cfg = small();
    let g = generate(&cfg);
    assert_eq!(g.sequences.len(), cfg.num_users);
    assert_eq!(g.latent.len(), cfg.num_users);
    assert_eq!(g.intents.len(), cfg.k_latent);
    for (s, l) in g.sequences.iter().zip(&g.latent) {
        s.validate(Some(cfg.num_items)).unwrap();
        assert!((cfg.seq_len_min..=cfg.seq_len_max).contains(&s.len()));
        assert_eq!(s.user_id, l.user_id);
        assert_eq!(l.latent.len(), s.len());
        assert!(l.latent.iter().all(|&z| z < cfg.k_latent));
    }
    for p in &g.profiles {
        for row in &p.transition {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn latent_intent_shapes_genres() {
    let cfg = GeneratorConfig {
        num_users: 300,
        ..small()
    };
    let g = generate(&cfg);
    // how often an interaction carries its latent intent's favourite genre
    let mut hits = 0usize;
    let mut total = 0usize;
    for (s, l) in g.sequences.iter().zip(&g.latent) {
        for (it, &z) in s.interactions.iter().zip(&l.latent) {
            let fav = g.intents[z]
                .genre
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            hits += usize::from(it.genres.contains(&fav));
            total += 1;
        }
    }
    let rate = hits as f64 / total as f64;
    assert!(rate > 0.4, "favourite genre rate {rate}");
}

#[test]
fn latent_state_only_changes_at_session_gaps() {
    let g = generate(&small());
    for (s, l) in g.sequences.iter().zip(&g.latent) {
        for k in 1..s.len() {
            if l.latent[k] != l.latent[k - 1] {
                assert!(s.interactions[k].timestamp - s.interactions[k - 1].timestamp >= DAY);
            }
        }
    }
}

#[test]
fn every_recency_bucket_occurs() {
    let g = generate(&GeneratorConfig {
        num_users: 200,
        ..small()
    });
    let mut seen = [false; NUM_TSR];
    for s in &g.sequences {
        for it in &s.interactions {
            seen[it.time_since_release] = true;
        }
    }
    assert!(seen.iter().all(|&b| b), "{seen:?}");
}

#[test]
fn recency_bucket_boundaries() {
    assert_eq!(tsr_bucket(0), 0);
    assert_eq!(tsr_bucket(WEEK), 0);
    assert_eq!(tsr_bucket(WEEK + 1), 1);
    assert_eq!(tsr_bucket(MONTH), 1);
    assert_eq!(tsr_bucket(MONTH + 1), 2);
}

#[test]
fn empty_catalog_is_a_config_error() {
    assert!(matches!(generate_catalog(0, 1), Err(Error::Config(_))));
}

#[test]
fn default_split_is_86_7_7() {
    let cfg = Config::desk().data;
    let users: Vec<UserSequence> = (0..2000)
        .map(|user_id| UserSequence {
            user_id,
            interactions: vec![],
        })
        .collect();
    let [a, b, c] = cfg.split;
    let s = split_dataset(&users, (a, b, c), 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1720, 140, 140));
    let mut ids: Vec<u64> = s
        .train
        .iter()
        .chain(&s.val)
        .chain(&s.test)
        .map(|u| u.user_id)
        .collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..2000).collect::<Vec<_>>());
    assert_eq!(split_dataset(&users, (a, b, c), 3).unwrap(), s);
    assert_ne!(split_dataset(&users, (a, b, c), 4).unwrap().test, s.test);
    assert!(split_dataset(&users, (0.9, 0.2, 0.0), 3).is_err());
}

#[test]
fn files_round_trip() {
    let cfg = small();
    let catalog = generate_catalog(cfg.num_items, cfg.seed).unwrap();
    let g = generate_users(&catalog, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/train.jsonl");
    write_jsonl(&path, &g.sequences).unwrap();
    assert_eq!(read_jsonl(&path, Some(cfg.num_items)).unwrap(), g.sequences);

    let lpath = latent_path(&path);
    assert_eq!(lpath.file_name().unwrap(), "train.latent.jsonl");
    write_latent_jsonl(&lpath, &g.latent).unwrap();
    assert_eq!(read_latent_jsonl(&lpath).unwrap(), g.latent);

    let cpath = dir.path().join("catalog.json");
    write_catalog(&cpath, &catalog).unwrap();
    assert_eq!(read_catalog(&cpath).unwrap(), catalog);
}

fn write_lines(lines: &[String]) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    std::fs::write(&path, lines.join("\n")).unwrap();
    (dir, path)
}

fn line(user: u64, items: &[(usize, i64)]) -> String {
    let its: Vec<String> = items
        .iter()
        .map(|(item, ts)| {
            format!(
                r#"{{"item_id":{item},"action_type":0,"genres":[1],"movie_show":1,"tsr":2,"ts":{ts},"dur":60.0,"ep":0.0}}"#
            )
        })
        .collect();
    format!(r#"{{"user_id":{user},"interactions":[{}]}}"#, its.join(","))
}

#[test]
fn malformed_input_is_reported_with_its_line() {
    let good = line(0, &[(1, 10), (2, 20)]);

    let (_d, p) = write_lines(&[good.clone(), "{not json".into()]);
    match read_jsonl(&p, None).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        e => panic!("{e}"),
    }

    let (_d, p) = write_lines(&[good.clone(), good.clone(), line(2, &[(1, 30), (2, 30)])]);
    let err = read_jsonl(&p, None).unwrap_err();
    assert!(
        matches!(&err, Error::Validation { line: Some(3), field, .. } if field == "ts"),
        "{err}"
    );
    assert_eq!(err.exit_code(), 3);

    let (_d, p) = write_lines(&[line(0, &[(50, 10), (2, 20)])]);
    assert!(read_jsonl(&p, None).is_ok());
    let err = read_jsonl(&p, Some(20)).unwrap_err();
    assert!(err.to_string().contains("item_id"), "{err}");

    let (_d, p) = write_lines(&[line(0, &[(1, 10)])]);
    assert!(matches!(
        read_jsonl(&p, None),
        Err(Error::Validation { .. })
    ));

    let bad_genre = good.replace(r#""genres":[1]"#, r#""genres":[21]"#);
    let (_d, p) = write_lines(&[bad_genre]);
    assert!(read_jsonl(&p, None)
        .unwrap_err()
        .to_string()
        .contains("genres"));

    let bad_ep = good.replace(r#""ep":0.0"#, r#""ep":1.5"#);
    let (_d, p) = write_lines(&[bad_ep]);
    assert!(read_jsonl(&p, None)
        .unwrap_err()
        .to_string()
        .contains("`ep`"));
}

#[test]
fn truncation_keeps_the_latest_interactions() {
    let g = generate(&small());
    let s = &g.sequences[0];
    let t = s.truncated(5);
    assert_eq!(t.len(), 5);
    assert_eq!(t, &s.interactions[s.len() - 5..]);
    assert_eq!(s.truncated(1000).len(), s.len());
}

#[test]
fn near_deterministic_profiles_concentrate_on_their_genre() {
    let cfg = GeneratorConfig {
        k_latent: 3,
        genre_focus: 0.9,
        home_affinity: 1.0,
        num_users: 200,
        ..small()
    };
    let g = generate(&cfg);
    let mut shares = Vec::new();
    for (s, p) in g.sequences.iter().zip(&g.profiles) {
        let fav = g.intents[p.home]
            .genre
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let hits = s
            .interactions
            .iter()
            .filter(|i| i.genres.contains(&fav))
            .count();
        shares.push(hits as f64 / s.len() as f64);
    }
    let mean = shares.iter().sum::<f64>() / shares.len() as f64;
    assert!(mean >= 0.8, "mean share {mean}");
}

#[test]
fn latent_state_is_informative_about_the_action() {
    let cfg = GeneratorConfig {
        num_users: 600,
        ..small()
    };
    let g = generate(&cfg);
    let mut joint = vec![vec![0.0; seqintent_core::data::NUM_ACTION_TYPES]; cfg.k_latent];
    let mut n = 0.0;
    for (s, l) in g.sequences.iter().zip(&g.latent) {
        for (it, &z) in s.interactions.iter().zip(&l.latent) {
            joint[z][it.action_type] += 1.0;
            n += 1.0;
        }
    }
    assert!(n >= 10_000.0, "{n} interactions");
    let pz: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let pa: Vec<f64> = (0..joint[0].len())
        .map(|a| joint.iter().map(|r| r[a]).sum::<f64>() / n)
        .collect();
    let mut mi = 0.0;
    for (z, row) in joint.iter().enumerate() {
        for (a, &c) in row.iter().enumerate() {
            if c > 0.0 {
                let p = c / n;
                mi += p * (p / (pz[z] * pa[a])).ln();
            }
        }
    }
    assert!(mi > 0.1, "mutual information {mi} nats");
}
