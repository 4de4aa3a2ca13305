//! Suite-level checks through the public API on a tiny model.

use wemoe_bench::analysis::{drift_report, first_choice_matrix, grid_values, loss_landscape_grid, LandscapeTask};
use wemoe_bench::data::TaskFamily;
use wemoe_bench::train::dataset_loss;
use wemoe_bench::{prepare_suite, BenchConfig, Method, Suite};
use wemoe_core::vit::{Image, ViTConfig};

fn tiny_suite() -> Suite<f64> {
    let mut c = BenchConfig::desk(&[TaskFamily::StripeOrientation, TaskFamily::CornerQuadrant, TaskFamily::GlyphTemplate], 5);
    c.vit = ViTConfig {
        image_size: 16,
        patch_size: 8,
        channels: 1,
        d_model: 16,
        n_heads: 2,
        n_blocks: 2,
        mlp_hidden: 32,
        ln_eps: 1e-5,
    };
    for t in c.tasks.iter_mut().chain([&mut c.generic]) {
        t.image_size = 16;
        t.n_train = 24;
        t.n_test = 12;
    }
    c.pretrain.epochs = 1;
    c.finetune.epochs = 1;
    prepare_suite(&c).unwrap()
}

#[test]
fn pruned_dictionaries_shrink_storage_but_keep_routing_shapes() {
    let suite = tiny_suite();
    let ids = [0, 1, 2];
    let dense = suite.upscale(Method::Wemoe, &ids).unwrap();
    let sparse = suite.upscale(Method::EWemoe(0.9), &ids).unwrap();
    assert!(sparse.stored_values() < dense.stored_values());
    assert_eq!(dense.routers.len(), 2);
    assert_eq!(sparse.routers.len(), 1);

    let sources: Vec<Vec<Image>> = suite.datasets.iter().map(|d| d.test_images()).collect();
    let fc = first_choice_matrix(&sparse, &sources).unwrap();
    assert_eq!(fc.shares.len(), 3);
    for per_module in &fc.shares {
        assert_eq!(per_module.len(), 2);
        for shares in per_module {
            assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn landscape_corners_are_the_expert_and_base_losses() {
    let suite = tiny_suite();
    let tvs = suite.task_vectors(&[0, 1]).unwrap();
    let samples: Vec<_> = suite.datasets[..2].iter().map(|d| d.test().to_vec()).collect();
    let task = |i: usize| LandscapeTask {
        tau: &tvs[i],
        samples: &samples[i],
        head: &suite.experts[i].head,
    };
    let grid = grid_values(0.0, 1.0, 3).unwrap();
    let land = loss_landscape_grid(&suite.config.vit, &suite.theta_0, &task(0), &task(1), &grid, &grid).unwrap();
    let loss = |i: usize, params| dataset_loss(&suite.vit(params).unwrap(), &samples[i], &suite.experts[i].head).unwrap();
    let base = land.at(0.0, 0.0).unwrap();
    assert!((base.loss1 - loss(0, suite.theta_0.clone())).abs() < 1e-9);
    assert!((land.at(1.0, 0.0).unwrap().loss1 - loss(0, suite.experts[0].params.clone())).abs() < 1e-9);
    assert!((land.at(0.0, 1.0).unwrap().loss2 - loss(1, suite.experts[1].params.clone())).abs() < 1e-9);
    assert!(land.dominating_cells().is_empty());

    let experts: Vec<_> = suite.experts.iter().map(|e| &e.params).collect();
    let rows = drift_report(&suite.theta_0, &experts).unwrap();
    assert_eq!(rows.len(), 2 * 3);
    assert!(rows.iter().all(|r| r.mean_sq_l2 > 0.0));
}
