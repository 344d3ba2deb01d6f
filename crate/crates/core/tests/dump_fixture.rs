use glassvae_core::periodic_graph::build_graph;
use glassvae_core::trajio::{parse_dump, SpeciesMap};

const L: f64 = 12.3;

fn frames() -> Vec<glassvae_core::Configuration> {
    let map = SpeciesMap::parse("1=Cu\n2=Zr\n").unwrap();
    let file = std::fs::File::open(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/cuzr108.dump"
    ))
    .unwrap();
    parse_dump(file, &map, 800.0).unwrap()
}

/// Lattice position of atom `id` as written in the fixture.
fn expected(id: usize) -> [f64; 3] {
    let k = id - 1;
    [
        (k % 6) as f64 * L / 6.0 + 0.3,
        ((k / 6) % 6) as f64 * L / 6.0 + 0.2,
        (k / 36) as f64 * L / 3.0 + 0.1 + 0.05 * (k % 2) as f64,
    ]
}

#[test]
fn reads_both_frames_of_108_atoms() {
    let f = frames();
    assert_eq!(f.len(), 2);
    assert_eq!([f[0].frame_id, f[1].frame_id], [0, 2000]);
    for c in &f {
        assert_eq!(c.n_atoms(), 108);
        assert_eq!(c.box_lengths, [L; 3]);
        assert_eq!(c.temperature_tag, 800.0);
        assert!(c.energy.is_none());
        assert_eq!(c.species.iter().filter(|s| *s == "Cu").count(), 70);
        assert_eq!(c.species.iter().filter(|s| *s == "Zr").count(), 38);
    }
}

#[test]
fn shuffled_ids_come_back_sorted() {
    let f = frames();
    for (i, p) in f[0].positions.iter().enumerate() {
        let e = expected(i + 1);
        for k in 0..3 {
            assert!(
                (p[k] - e[k]).abs() < 1e-6,
                "atom {} axis {k}: {} vs {}",
                i + 1,
                p[k],
                e[k]
            );
        }
    }
    assert!(f[0].species[..70].iter().all(|s| s == "Cu"));
}

#[test]
fn unwrapped_and_scaled_columns_agree() {
    let f = frames();
    for c in &f {
        assert!(c.positions.iter().flatten().all(|&v| (0.0..L).contains(&v)));
    }
    for (a, b) in f[0].positions.iter().zip(&f[1].positions) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-5);
        }
    }
}

#[test]
fn fixture_builds_a_graph() {
    let species = ["Cu".to_string(), "Zr".to_string()];
    let g = build_graph(&frames()[0], 5.0, None, &species).unwrap();
    assert_eq!(g.n_nodes(), 108);
    assert!(g.n_edges() > 108);
    assert_eq!(g.n_edges() % 2, 0);
}
