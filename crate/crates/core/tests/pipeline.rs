mod common;

use std::path::Path;

use voxelgat::gat::{GatConfig, GatModel};
use voxelgat::graph::{attach_labels, project_to_voxels};
use voxelgat::io::{modality_path, read_nifti, write_nifti_channel, LABEL_DESCRIPTION};
use voxelgat::metrics::{evaluate, Region};
use voxelgat::phantom::PhantomSpec;
use voxelgat::pipeline::{run_pipeline, Mode, PipelineConfig, Stage};
use voxelgat::supervoxel::{SlicParams, SupervoxelLabeling};
use voxelgat::training::{train, TrainConfig};
use voxelgat::volume::{LabelVolume, Modality, MultiModalVolume};

fn tiny_model() -> GatConfig {
    GatConfig {
        hidden_layers: 1,
        hidden_dim: 4,
        hidden_heads: 2,
        output_heads: 2,
        ..GatConfig::default()
    }
}

fn write_nifti_case(dir: &Path, case: &str, v: &MultiModalVolume, l: &LabelVolume) {
    let case_dir = dir.join(case);
    std::fs::create_dir_all(&case_dir).unwrap();
    for m in Modality::ALL {
        write_nifti_channel(&modality_path(&case_dir, case, m), v.dims(), v.spacing(), v.channel(m)).unwrap();
    }
    // Source segmentations store enhancing tumor as 4.
    let brats: Vec<f64> = l.labels().iter().map(|&x| if x == 3 { 4.0 } else { x as f64 }).collect();
    write_nifti_channel(&case_dir.join(format!("{case}_seg.nii.gz")), l.dims(), l.spacing(), &brats).unwrap();
}

#[test]
fn nifti_cases_round_trip_through_the_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { shape: [20, 24, 28], edema_radius: [3.0, 6.0], count: 3, ..PhantomSpec::default() };
    for i in 0..3 {
        let (v, l) = spec.generate_one(i).unwrap();
        let spacing = [2.0, 1.0, 0.5];
        let v = MultiModalVolume::new(v.dims(), spacing, v.channels().clone()).unwrap();
        let l = LabelVolume::new(l.dims(), spacing, l.labels().to_vec()).unwrap();
        write_nifti_case(root.path(), &format!("case{i}"), &v, &l);
    }
    let out = root.path().join("out");
    let cfg = PipelineConfig {
        train_inputs: vec![root.path().join("case0"), root.path().join("case1")],
        eval_inputs: vec![root.path().join("case2")],
        out_dir: out.clone(),
        slic: SlicParams { k: 150, ..SlicParams::default() },
        auto_k: false,
        model: tiny_model(),
        train: TrainConfig { epochs: 2, ..TrainConfig::default() },
        overlay: true,
        ..PipelineConfig::default()
    };
    let outcome = run_pipeline(&cfg).unwrap();
    assert_eq!(outcome.reports.len(), 1);
    let pred = read_nifti(&out.join("case2.pred.nii.gz")).unwrap();
    assert_eq!(pred.dims, [20, 24, 28]);
    assert_eq!(&pred.header.pixdim[1..4], &[0.5, 1.0, 2.0]);
    assert!(pred.header.descrip.starts_with(LABEL_DESCRIPTION.as_bytes()));
    assert!(pred.data.iter().all(|&x| x == 0.0 || x == 1.0 || x == 2.0 || x == 3.0));
    assert!(out.join("case2.overlay.png").is_file());

    // Predict mode reuses the checkpoint and needs no training inputs.
    let predict = PipelineConfig {
        mode: Mode::Predict,
        train_inputs: vec![],
        out_dir: root.path().join("predict"),
        checkpoint: Some(out.join("model.gatc")),
        ..cfg.clone()
    };
    let again = run_pipeline(&predict).unwrap();
    assert_eq!(again.reports, outcome.reports);
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let root = tempfile::tempdir().unwrap();
    let paths = PhantomSpec { shape: [16, 16, 16], edema_radius: [3.0, 5.0], ..PhantomSpec::default() }
        .write_to(root.path())
        .unwrap();
    let cfg = PipelineConfig {
        mode: Mode::Predict,
        eval_inputs: paths,
        out_dir: root.path().join("out"),
        checkpoint: Some(root.path().join("absent.gatc")),
        ..PipelineConfig::default()
    };
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("absent.gatc"));
}

#[test]
fn homogeneous_clusters_round_trip_to_perfect_dice() {
    let spec = PhantomSpec { shape: [16, 16, 16], edema_radius: [3.0, 5.0], noise: 0.0, ..PhantomSpec::default() };
    let (v, gt) = spec.generate_one(0).unwrap();
    // One cluster per (label, octant): every cluster is label-pure.
    let assignment = gt
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let octant = (i / 256 >= 8) as u32 * 4 + ((i / 16) % 16 >= 8) as u32 * 2 + (i % 16 >= 8) as u32;
            octant * 4 + l as u32
        })
        .collect::<Vec<_>>();
    let mut dense: Vec<u32> = assignment.clone();
    dense.sort_unstable();
    dense.dedup();
    let assignment = assignment.iter().map(|a| dense.binary_search(a).unwrap() as u32).collect();
    let s = SupervoxelLabeling::from_assignment(&v, assignment).unwrap();
    let nodes = attach_labels(&s, &gt).unwrap();
    let back = project_to_voxels(&s, &nodes, [1.0; 3]).unwrap();
    assert_eq!(back, gt);
    let report = evaluate(&back, &gt, [1.0; 3]).unwrap();
    for r in Region::ALL {
        assert_eq!(report.region(r).dice, 1.0);
        assert_eq!(report.region(r).hd95, Some(0.0));
    }
}

#[test]
fn training_is_reproducible() {
    let mut r = common::rng(3);
    let data: Vec<_> = (0..5).map(|_| common::random_rag(&mut r, 15)).collect();
    let cfg = TrainConfig { epochs: 4, graphs_per_batch: 2, seed: 11, ..TrainConfig::default() };
    let run = || {
        let m = GatModel::<f64>::new(tiny_model()).unwrap();
        train(m, &data, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert_eq!(a.log.records.len(), 4);
}
