use std::collections::BTreeSet;

use vox2p1d::cv::{run_cv, Branch, CvConfig, FeatureBank, SubjectInfo};
use vox2p1d::decomposition::{decompose8, extract_view_slices, ChannelMode, ExtractorDescriptor, View};
use vox2p1d::extraction::{
    branch_features, extract_stack, feature_file_name, import_external_features, maxpool8, StubExtractor,
};
use vox2p1d::net1d::TrainConfig;
use vox2p1d::tensor::tensor_write;
use vox2p1d::volume::{
    generate_phantom_cohort, pad_to_even, volume_from_tensor, EffectRegion, Metric, MetricDeltas, PhantomSpec,
};
use vox2p1d::Tensor;

fn tiny_descriptor(ch: usize) -> ExtractorDescriptor {
    ExtractorDescriptor {
        input_height: 6,
        input_width: 6,
        channel_mode: ChannelMode::Single,
        intensity_range: (0.0, 1.0),
        out_dims: (1, 1, ch),
    }
}

fn small_spec(n_per_class: usize) -> PhantomSpec {
    let delta = MetricDeltas { gm: -0.3, wm: 0.3, csf: 0.3 };
    PhantomSpec {
        n_per_class,
        dims: [32, 32, 32],
        effect_regions: vec![EffectRegion { center: [16, 16, 16], radius: 6, delta }],
        noise_sigma: 0.02,
        seed: 11,
    }
}

#[test]
fn reference_volume_slice_counts() {
    let v = volume_from_tensor(Tensor::filled(vec![121, 145, 121], 0.5).unwrap(), "s", Metric::Gm).unwrap();
    let stub = StubExtractor::new(tiny_descriptor(2), 1).unwrap();
    let direct = branch_features(&v, View::Axial, &stub, true).unwrap();
    assert_eq!(direct.maps.dims(), &[122, 1, 1, 2]);

    let sub = decompose8(&pad_to_even(&v)).unwrap();
    let expect = [(View::Axial, 61, [61, 73]), (View::Coronal, 73, [61, 61]), (View::Sagittal, 61, [73, 61])];
    for (view, n, plane) in expect {
        let stack = extract_view_slices(&sub.subvolumes[0], view).unwrap();
        assert_eq!(stack.len(), n);
        assert_eq!(stack.slices[0].dims(), &plane);
    }
}

#[test]
fn imported_maps_match_the_in_process_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_phantom_cohort(&small_spec(1), dir.path().join("cohort")).unwrap();
    let desc = tiny_descriptor(3);
    let stub = StubExtractor::new(desc.clone(), 5).unwrap();
    let feats = dir.path().join("features");
    std::fs::create_dir_all(&feats).unwrap();
    for s in &manifest.subjects {
        for metric in Metric::ALL {
            let v = manifest.load_volume(s, metric).unwrap();
            let sub = decompose8(&pad_to_even(&v)).unwrap();
            for view in View::ALL {
                for (k, sv) in sub.subvolumes.iter().enumerate() {
                    let maps = extract_stack(&extract_view_slices(sv, view).unwrap(), &stub).unwrap();
                    tensor_write(&maps, feats.join(feature_file_name(&s.id, metric, view, k))).unwrap();
                }
            }
        }
    }
    let imported = import_external_features(&feats, &manifest, Some(desc.out_dims)).unwrap();
    assert_eq!(imported.len(), manifest.subjects.len() * 9 * 8);
    let s = &manifest.subjects[1];
    for metric in Metric::ALL {
        let v = manifest.load_volume(s, metric).unwrap();
        for view in View::ALL {
            let sets: Vec<_> = (0..8).map(|k| imported[&(s.id.clone(), metric, view, k)].clone()).collect();
            let pooled = maxpool8(&sets).unwrap();
            assert_eq!(pooled.maps, branch_features(&v, view, &stub, false).unwrap().maps);
        }
    }

    std::fs::remove_file(feats.join(feature_file_name(&s.id, Metric::Csf, View::Sagittal, 7))).unwrap();
    let err = import_external_features(&feats, &manifest, None).unwrap_err();
    assert!(err.to_string().contains("k=7"), "{err}");
}

fn phantom_bank(n_per_class: usize) -> FeatureBank {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_phantom_cohort(&small_spec(n_per_class), dir.path()).unwrap();
    let stub = StubExtractor::new(tiny_descriptor(8), 3).unwrap();
    let branches = Branch::all();
    let maps = branches
        .iter()
        .map(|b| {
            manifest
                .subjects
                .iter()
                .map(|s| {
                    branch_features(&manifest.load_volume(s, b.metric).unwrap(), b.view, &stub, false).unwrap().maps
                })
                .collect()
        })
        .collect();
    let subjects = manifest.subjects.iter().map(|s| SubjectInfo { id: s.id.clone(), label: s.label }).collect();
    FeatureBank::new(subjects, branches, maps).unwrap()
}

#[test]
fn cross_validation_report_structure() {
    let bank = phantom_bank(6);
    let cfg =
        CvConfig { n_repeats: 2, train: TrainConfig { epochs: 3, ..TrainConfig::default() }, ..CvConfig::default() };
    let report = run_cv(&bank, &cfg).unwrap();
    assert_eq!(report.cells.len(), 10);
    assert_eq!(report.branches.len(), 9);
    assert_eq!(report.n_subjects, 12);
    for b in &report.branches {
        assert_eq!((b.input.slices, b.input.channels), (8, 2));
    }
    assert_eq!(report.total_parameters, report.branches.iter().map(|b| b.parameter_count).sum::<usize>());
    for r in 0..2 {
        let mut seen = BTreeSet::new();
        for c in report.cells.iter().filter(|c| c.repeat == r) {
            assert_eq!(c.n_train + c.predictions.len(), 12);
            assert_eq!(c.weights.len(), 9);
            for p in &c.predictions {
                assert!(seen.insert(p.subject.clone()), "{} tested twice", p.subject);
                assert!((0.0..=1.0).contains(&p.p_fused));
            }
        }
        assert_eq!(seen.len(), 12);
    }
    let again = run_cv(&bank, &cfg).unwrap();
    assert_eq!(report.to_json(), again.to_json());
}

#[test]
fn ablation_shapes() {
    let bank = phantom_bank(4);
    let base =
        CvConfig { n_repeats: 1, train: TrainConfig { epochs: 1, ..TrainConfig::default() }, ..CvConfig::default() };
    let wide = run_cv(&bank, &CvConfig { skip_global_pooling: true, ..base.clone() }).unwrap();
    assert_eq!((wide.branches[0].input.slices, wide.branches[0].input.channels), (16, 8));
    let pooled = run_cv(&bank, &base).unwrap();
    assert!(wide.total_parameters > pooled.total_parameters);

    let linear = run_cv(&bank, &CvConfig { skip_net1d: true, ..base.clone() }).unwrap();
    assert_eq!(linear.branches[0].parameter_count, 8 * 2 * 2 + 2);

    let single = run_cv(&bank, &CvConfig { skip_fusion: true, ..base }).unwrap();
    for c in &single.cells {
        let chosen = c.selected_branch.expect("a branch is selected");
        let idx = single.branches.iter().position(|b| b.branch == chosen).unwrap();
        assert_eq!(c.weights.iter().filter(|&&w| w != 0.0).count(), 1);
        assert_eq!(c.weights[idx], 1.0);
        let acc = c.inner_accuracies.as_ref().unwrap();
        assert!(acc.iter().all(|&a| a <= acc[idx]));
    }
}
