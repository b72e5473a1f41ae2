//! File-format round trips: datasets, checkpoints, and system descriptions
//! must survive a write/read cycle bit for bit.

use proptest::prelude::*;
use tempfile::tempdir;

use phlab::core::dataset::{build_dataset, DatasetSpec};
use phlab::core::model::DynModel;
use phlab::core::system::{LeakForce, SystemSpec, TankNetworkSpec};
use phlab::experiments::{msd_system, tank_system};
use phlab::io;
use phlab::trainer::{descriptor_for, ModelKind};

fn sample_dataset(noise: f64) -> phlab::core::dataset::TrajectoryDataset {
    let spec = DatasetSpec {
        n_samples: 60,
        trajectory_length: 0.2,
        sample_dt: 0.01,
        noise_std: noise,
        seed: 11,
    };
    build_dataset(&msd_system(), &spec).unwrap()
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    for noise in [0.0, 0.05] {
        let ds = sample_dataset(noise);
        let path = dir.path().join(format!("ds-{noise}.csv"));
        io::write_dataset(&path, &ds).unwrap();
        let back = io::read_dataset(&path).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.trajectories.len(), ds.trajectories.len());
        for (a, b) in back.trajectories.iter().zip(&ds.trajectories) {
            assert_eq!(a.times.len(), b.times.len());
            for (ta, tb) in a.times.iter().zip(&b.times) {
                assert_eq!(ta.to_bits(), tb.to_bits());
            }
            for (xa, xb) in a.states.iter().zip(&b.states) {
                for (va, vb) in xa.iter().zip(xb) {
                    assert_eq!(va.to_bits(), vb.to_bits());
                }
            }
        }
    }
}

#[test]
fn dataset_reader_rejects_malformed_rows() {
    let dir = tempdir().unwrap();
    let ds = sample_dataset(0.0);
    let path = dir.path().join("ds.csv");
    io::write_dataset(&path, &ds).unwrap();

    // Truncate one field off the last row.
    let text = std::fs::read_to_string(&path).unwrap();
    let trimmed = text.trim_end_matches('\n');
    let cut = trimmed.rfind(',').unwrap();
    let broken = dir.path().join("broken.csv");
    std::fs::write(&broken, &trimmed[..cut]).unwrap();
    assert!(io::read_dataset(&broken).is_err());

    // Remove the metadata header entirely.
    let body = text.splitn(2, '\n').nth(1).unwrap();
    let headless = dir.path().join("headless.csv");
    std::fs::write(&headless, body).unwrap();
    assert!(io::read_dataset(&headless).is_err());
}

#[test]
fn checkpoint_round_trip_restores_parameters_and_outputs() {
    let dir = tempdir().unwrap();
    for (kind, system) in [
        (ModelKind::Phnn, msd_system()),
        (ModelKind::PhnnFt, msd_system()),
        (ModelKind::Phnn, tank_system(&[(3, 30.0)])),
        (ModelKind::Baseline1, msd_system()),
        (ModelKind::Baseline2, tank_system(&[])),
    ] {
        let mut model = DynModel::from_descriptor(&descriptor_for(kind, &system)).unwrap();
        model.initialize(42);
        let path = dir.path().join(format!("{}-{}.ckpt", kind.name(), system.dim()));
        io::write_checkpoint(&path, &model).unwrap();
        let back = io::read_checkpoint(&path).unwrap();

        assert_eq!(back.params().values().len(), model.params().values().len());
        for (a, b) in back.params().values().iter().zip(model.params().values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let x: Vec<f64> = (0..system.dim()).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let ya = model.eval(&x, 0.7).unwrap();
        let yb = back.eval(&x, 0.7).unwrap();
        assert_eq!(ya, yb);
    }
}

#[test]
fn checkpoint_reader_rejects_wrong_payload_size() {
    let dir = tempdir().unwrap();
    let mut model =
        DynModel::from_descriptor(&descriptor_for(ModelKind::Phnn, &msd_system())).unwrap();
    model.initialize(1);
    let path = dir.path().join("m.ckpt");
    io::write_checkpoint(&path, &model).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let short = dir.path().join("short.ckpt");
    std::fs::write(&short, &bytes[..bytes.len() - 8]).unwrap();
    assert!(io::read_checkpoint(&short).is_err());

    let long = dir.path().join("long.ckpt");
    let mut extended = bytes.clone();
    extended.extend_from_slice(&[0u8; 8]);
    std::fs::write(&long, &extended).unwrap();
    assert!(io::read_checkpoint(&long).is_err());
}

#[test]
fn system_json_round_trips_all_presets() {
    let dir = tempdir().unwrap();
    let leaky = TankNetworkSpec::default_four_tank()
        .with_leaks(vec![LeakForce { tank: 3, coefficient: 30.0, saturation: 0.3 }])
        .unwrap();
    let systems = [msd_system(), tank_system(&[]), SystemSpec::TankNetwork(leaky)];
    for (i, system) in systems.iter().enumerate() {
        let path = dir.path().join(format!("sys{i}.json"));
        io::write_system(&path, system).unwrap();
        let back = io::read_system(&path).unwrap();
        assert_eq!(back, *system);
    }
}

#[test]
fn tables_write_one_line_per_row_plus_header() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("t.csv");
    io::write_table(&path, &["a", "b"], &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "a,b");
    assert!(lines[1].starts_with("1."));
}

proptest! {
    // 17 significant digits uniquely identify a double, so the decimal
    // format must round trip every finite value exactly.
    #[test]
    fn float_format_round_trips(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        let s = phlab::io::format_float(v);
        let back: f64 = s.parse().unwrap();
        prop_assert_eq!(back.to_bits(), v.to_bits());
    }
}
