use std::path::Path;
use std::process::{Command, Output};

use gaussiancube::fit::{save_dataset, View};
use gaussiancube::io::{export_splat_ply, write_cube};
use gaussiancube::ot::GaussianCube;
use gaussiancube::{render, Aabb, Camera, Gaussian, GaussianSet, Image, CHANNELS};

fn gcube(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcube")).args(args).output().expect("gcube runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn camera(angle: f64) -> Camera {
    Camera::look_at([3.0 * angle.cos(), 0.3, 3.0 * angle.sin()], [0.0; 3], [0.0, -1.0, 0.0], 20.0, 20.0, 16, 16)
}

fn write_dataset(root: &Path) {
    let truth = GaussianSet::new(vec![Gaussian::isotropic([0.0; 3], 0.3, 0.9, [0.8, 0.3, 0.2])], Aabb::unit());
    let views: Vec<View> = (0..3)
        .map(|k| {
            let camera = camera(k as f64 * 2.0);
            let image = render(&truth, &camera, [1.0; 3]).unwrap().image;
            View { name: format!("v{k}"), camera, image }
        })
        .collect();
    save_dataset(root, &views).unwrap();
}

fn write_camera(path: &Path, cam: &Camera) {
    std::fs::write(path, serde_json::to_string(cam).unwrap()).unwrap();
}

#[test]
fn fit_prints_psnr_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data);
    let out = dir.path().join("fit.ply");
    let o = gcube(&["fit", p(&data), "-o", p(&out), "--iterations", "60", "--n-max", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("padded to 8"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("mean")), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with('v')).count(), 4, "{text}");
    assert!(out.exists());
}

#[test]
fn fit_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = gcube(&["fit", p(&data), "-o", p(&out), "--iterations", "30", "--n-max", "4", "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
        (stdout(&o), std::fs::read(out).unwrap())
    };
    assert_eq!(run("a.ply"), run("b.ply"));
}

#[test]
fn fit_reports_missing_camera_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    let out = dir.path().join("fit.ply");
    let o = gcube(&["fit", p(dir.path()), "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(p(&dir.path().join("cameras"))), "{}", stderr(&o));
}

#[test]
fn fit_rejects_zero_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data);
    let o = gcube(&["fit", p(&data), "-o", p(&dir.path().join("x.ply")), "--iterations", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn fit_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data);
    let cfg = dir.path().join("fit.toml");
    std::fs::write(&cfg, "n_max = 8\nunknown_key = 1\n").unwrap();
    let o = gcube(&["fit", p(&data), "-o", p(&dir.path().join("x.ply")), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn grid_set() -> GaussianSet {
    let mut gs = Vec::new();
    for z in [-0.5, 0.5] {
        for y in [-0.5, 0.5] {
            for x in [-0.5, 0.5] {
                gs.push(Gaussian::isotropic([x, y, z], 0.1, 0.5, [0.5; 3]));
            }
        }
    }
    gs.reverse();
    GaussianSet::new(gs, Aabb::unit())
}

#[test]
fn voxelize_grid_aligned_set_has_zero_cost() {
    let dir = tempfile::tempdir().unwrap();
    let ply = dir.path().join("set.ply");
    export_splat_ply(&grid_set(), std::fs::File::create(&ply).unwrap()).unwrap();
    for extra in [&[][..], &["--exact"][..]] {
        let cube = dir.path().join("set.gcub");
        let mut args = vec!["voxelize", p(&ply), "-o", p(&cube), "--nv", "2", "--segments", "2"];
        args.extend_from_slice(extra);
        let o = gcube(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = stdout(&o);
        assert!(text.contains("total_cost 0\n"), "{text}");
        assert!(text.contains("mean_offset_norm 0\n"), "{text}");
        assert_eq!(std::fs::metadata(&cube).unwrap().len(), 40 + 8 * 14 * 4);
    }
}

#[test]
fn voxelize_rejects_oversized_set() {
    let dir = tempfile::tempdir().unwrap();
    let ply = dir.path().join("set.ply");
    export_splat_ply(&grid_set(), std::fs::File::create(&ply).unwrap()).unwrap();
    let o = gcube(&["voxelize", p(&ply), "-o", p(&dir.path().join("c.gcub")), "--nv", "1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn render_empty_cube_gives_background() {
    let dir = tempfile::tempdir().unwrap();
    let cube = GaussianCube::new(2, Aabb::unit(), vec![0.0; 8 * CHANNELS]).unwrap();
    let path = dir.path().join("zero.gcub");
    write_cube(&cube, std::fs::File::create(&path).unwrap()).unwrap();
    let cam_path = dir.path().join("cam.json");
    write_camera(&cam_path, &camera(0.0));
    let out = dir.path().join("out.png");
    let o = gcube(&["render", p(&path), "--camera", p(&cam_path), "-o", p(&out), "--background", "0.2,0.4,0.6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = Image::load_png(&out).unwrap();
    assert_eq!(img.to_rgb8(), Image::filled(16, 16, [0.2, 0.4, 0.6]).to_rgb8());
}

#[test]
fn render_rejects_invalid_camera() {
    let dir = tempfile::tempdir().unwrap();
    let ply = dir.path().join("set.ply");
    export_splat_ply(&grid_set(), std::fs::File::create(&ply).unwrap()).unwrap();
    let cam_path = dir.path().join("cam.json");
    let mut cam = camera(0.0);
    cam.fx = -1.0;
    write_camera(&cam_path, &cam);
    let o = gcube(&["render", p(&ply), "--camera", p(&cam_path), "-o", p(&dir.path().join("o.png"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cam.json"), "{}", stderr(&o));
}

#[test]
fn metrics_of_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    let data = (0..16 * 16 * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    Image::new(16, 16, data).unwrap().save_png(&a).unwrap();
    let o = gcube(&["metrics", p(&a), p(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), r#"{"psnr_db":"inf","ssim":1.0}"#);
}

#[test]
fn metrics_reports_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("missing.png");
    let o = gcube(&["metrics", p(&a), p(&a)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bench_lap_small_is_deterministic_and_bounded_by_exact() {
    let args = ["bench-lap", "--n", "720", "--segments", "4", "--seed", "3"];
    let a = gcube(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    let text = stdout(&a);
    let ratio: f64 = text.lines().find_map(|l| l.strip_prefix("ratio ")).unwrap().parse().unwrap();
    assert!(ratio >= 1.0 - 1e-12, "{text}");
    let cost = |t: &str| t.lines().find(|l| l.starts_with("cost ")).unwrap().to_string();
    assert_eq!(cost(&text), cost(&stdout(&gcube(&args))));
}

#[test]
fn bench_lap_rejects_uneven_segments() {
    let o = gcube(&["bench-lap", "--n", "10", "--segments", "4"]);
    assert_eq!(o.status.code(), Some(2));
}
