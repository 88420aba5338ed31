use super::*;
use crate::mesh::generate_rectangle_mesh;
use crate::optimizer::{HistoryRecord, OptimizationHistory};

#[test]
fn empty_file_gives_example_one_defaults() {
    let cfg = parse_config("").unwrap();
    assert_eq!(cfg.optim.nu, 2e-4);
    assert_eq!(cfg.optim.kappa, 1e-3);
    assert_eq!(cfg.optim.lambda1, 1.0);
    assert_eq!(cfg.optim.lambda2, 1e-2);
    assert_eq!(cfg.optim.beta, 500.0);
    assert_eq!(cfg.optim.v_target, 1.0);
    assert_eq!(cfg.physical, PhysicalParams::default());
    assert_eq!(cfg.physical.eps0, 0.01);
    assert_eq!(cfg.physical.epsm, 5.0);
    assert_eq!(cfg.physical.d0, 0.5);
    assert_eq!(cfg.physical.dm, 0.01);
    assert_eq!(cfg.physical.g_gamma2, -0.5);
    assert_eq!(cfg.physical.c_inf, 0.5);
    assert_eq!(cfg.physical.p, 2);
    assert_eq!(cfg.physical.alpha0, 1.0);
    match cfg.geometry {
        Geometry::Rectangle(r) => assert_eq!((r.nx, r.ny, r.width, r.height), (16, 32, 1.0, 2.0)),
        _ => panic!("expected rectangle"),
    }
}

#[test]
fn negative_kappa_cites_the_invariant_and_line() {
    let err = parse_config("[optim]\nbeta = 400.0\nkappa = -1\n").unwrap_err();
    assert!(err.message.contains("kappa must be > 0"), "{err}");
    assert_eq!(err.line, Some(3));
}

#[test]
fn unknown_keys_are_rejected_with_a_line() {
    let err = parse_config("[physical]\neps0 = 0.01\nepsilon_m = 5.0\n").unwrap_err();
    assert_eq!(err.line, Some(3), "{err}");
    assert!(err.message.contains("epsilon_m"));
    let err = parse_config("[optim]\nkappaa = 1e-3\n").unwrap_err();
    assert_eq!(err.line, Some(2));
    let err = parse_config("[solver]\n").unwrap_err();
    assert_eq!(err.line, Some(1));
}

#[test]
fn type_mismatch_has_a_line() {
    let err = parse_config("\n[rectangle]\nnx = \"many\"\n").unwrap_err();
    assert_eq!(err.line, Some(3), "{err}");
}

#[test]
fn physical_invariants_are_checked() {
    let err = parse_config("[physical]\nd0 = 0.5\ndm = 0.7\n").unwrap_err();
    assert!(err.message.contains("dm"), "{err}");
    assert_eq!(err.line, Some(2));
}

#[test]
fn annulus_switches_example_two_defaults() {
    let cfg = parse_config("[annulus]\n").unwrap();
    assert_eq!(cfg.optim.nu, 1e-3);
    let mesh = cfg.geometry.build_mesh().unwrap();
    assert!((cfg.optim.v_target - 0.5 * mesh.total_area()).abs() < 1e-14);
    let exact = 0.5 * std::f64::consts::PI * 0.96;
    assert!((cfg.optim.v_target - exact).abs() < 0.01 * exact);
    let explicit = parse_config("[annulus]\n[optim]\nnu = 5e-4\nv_target = 1.0\n").unwrap();
    assert_eq!(explicit.optim.nu, 5e-4);
    assert_eq!(explicit.optim.v_target, 1.0);
}

#[test]
fn both_geometries_is_an_error() {
    assert!(parse_config("[rectangle]\n[annulus]\n").is_err());
}

#[test]
fn config_round_trip() {
    for text in [
        "",
        "[annulus]\nnr = 6\n[optim]\nsensitivity_sign = \"printed\"\n",
        "[rectangle]\nnx = 5\nleft = \"gamma_two\"\nright = \"gamma_in\"\n[physical]\nc_inf_gamma2 = 0.1\n[run]\nseed = 9\noutput_dir = \"out/x\"\n",
    ] {
        let cfg = parse_config(text).unwrap();
        let again = parse_config(&config_to_string(&cfg)).unwrap();
        assert_eq!(cfg, again);
    }
}

#[test]
fn tag_override_swaps_sides() {
    let cfg = parse_config("[rectangle]\nnx = 2\nny = 2\nleft = \"gamma_two\"\nright = \"gamma_in\"\n").unwrap();
    let mesh = cfg.geometry.build_mesh().unwrap();
    for v in mesh.vertices_tagged(BoundaryTag::GammaIn) {
        assert_eq!(mesh.vertices[v][0], 1.0);
    }
}

#[test]
fn golden_vtk_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("phi.vtk");
    let mesh = generate_rectangle_mesh(1, 1, 1.0, 1.0).unwrap();
    write_vtk_snapshot(&path, &mesh, &[("phi", &[1.0; 4])]).unwrap();
    let golden = include_str!("../../tests/golden/unit_square_phi.vtk");
    assert_eq!(std::fs::read_to_string(&path).unwrap(), golden);
}

#[test]
fn vtk_without_fields_has_no_point_data() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mesh.vtk");
    let mesh = generate_rectangle_mesh(3, 2, 1.0, 1.0).unwrap();
    write_vtk_snapshot(&path, &mesh, &[]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(!text.contains("POINT_DATA"));
    let data = read_vtk(&path).unwrap();
    assert_eq!(data.points.len(), 12);
    assert_eq!(data.cells.len(), 12);
    assert!(data.cell_types.iter().all(|&t| t == 5));
    assert!(data.point_data.is_empty());
}

#[test]
fn vtk_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fields.vtk");
    let mesh = generate_rectangle_mesh(4, 3, 0.7, 1.3).unwrap();
    let a: Vec<f64> = mesh.vertices.iter().map(|p| (p[0] * 7.1).sin() / 3.0 + p[1]).collect();
    let b: Vec<f64> = mesh.vertices.iter().map(|p| 1e-200 * p[0] - 2e7 * p[1]).collect();
    write_vtk_snapshot(&path, &mesh, &[("a", &a), ("b", &b)]).unwrap();
    let first = std::fs::read(&path).unwrap();
    write_vtk_snapshot(&path, &mesh, &[("a", &a), ("b", &b)]).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
    let data = read_vtk(&path).unwrap();
    assert_eq!(data.point_data, vec![("a".to_string(), a), ("b".to_string(), b)]);
    for (p, q) in data.points.iter().zip(&mesh.vertices) {
        assert_eq!([p[0], p[1], p[2]], [q[0], q[1], 0.0]);
    }
    let cells: Vec<Vec<usize>> = mesh.triangles.iter().map(|t| t.to_vec()).collect();
    assert_eq!(data.cells, cells);
}

#[test]
fn vtk_rejects_wrong_field_length() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = generate_rectangle_mesh(1, 1, 1.0, 1.0).unwrap();
    let err = write_vtk_snapshot(&dir.path().join("x.vtk"), &mesh, &[("phi", &[1.0; 3])]).unwrap_err();
    assert!(matches!(err, IoError::FieldLength { expected: 4, found: 3, .. }));
}

#[test]
fn io_errors_name_the_path() {
    let mesh = generate_rectangle_mesh(1, 1, 1.0, 1.0).unwrap();
    let err = write_vtk_snapshot(Path::new("/nonexistent-dir/a.vtk"), &mesh, &[]).unwrap_err();
    assert!(err.to_string().contains("/nonexistent-dir/a.vtk"));
}

fn record(iter: usize) -> HistoryRecord {
    HistoryRecord {
        iter,
        objective: -0.1 * iter as f64 - 1e-17,
        energy: 3.0,
        penalized_energy: 3.5,
        volume: 1.0 + 1.0 / 3.0,
        volume_error: 1.0 / 3.0,
        gummel_iters: 2,
        wall_time_s: 0.25,
    }
}

#[test]
fn history_csv_single_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    let h = OptimizationHistory { records: vec![record(0)] };
    write_history_csv(&path, &h).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(text.lines().next().unwrap(), HISTORY_HEADER);
    assert!(!text.lines().nth(1).unwrap().contains('e'), "plain decimals only: {text}");
    assert_eq!(read_history_csv(&path).unwrap(), h);
}

#[test]
fn history_csv_round_trip_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    let h = OptimizationHistory { records: (0..5).map(record).collect() };
    write_history_csv(&path, &h).unwrap();
    assert_eq!(read_history_csv(&path).unwrap(), h);
    assert!(matches!(write_history_csv(&path, &OptimizationHistory::default()), Err(IoError::EmptyHistory)));
}
