use mfennet::complexity::{
    count_flops, count_params, executed_by_kind, report, totals_by_kind, tune_depths, Convention,
    REFERENCE_MFENNET, REFERENCE_UNET,
};
use mfennet::engine::{Shape4, Tape, Tensor4};
use mfennet::model::{Model, ModelConfig, ModelGraph, UNetConfig, TUNED_BLOCKS_PER_STAGE};
use proptest::prelude::*;

/// Independent count: parse the text manifest and multiply the dims.
fn manifest_count(manifest: &str) -> u64 {
    manifest
        .lines()
        .map(|line| {
            let dims = line.rsplit(' ').next().unwrap();
            dims.split('x').map(|d| d.parse::<u64>().unwrap()).product::<u64>()
        })
        .sum()
}

fn input(side: usize) -> Shape4 {
    Shape4::new(1, 3, side, side)
}

#[test]
fn unet_lands_on_reference() {
    let g = ModelGraph::unet(&UNetConfig::default()).unwrap();
    let r = report(&g, input(256), Convention::MacAsOne).unwrap();
    let (dp, df) = r.delta(&REFERENCE_UNET);
    assert!(dp.abs() <= 0.02, "params {} delta {dp}", r.total_params);
    assert!(df.abs() <= 0.15, "flops {} delta {df}", r.total_flops);
}

#[test]
fn tuned_default_lands_on_reference() {
    let g = ModelGraph::mfennet(&ModelConfig::default()).unwrap();
    let r = report(&g, input(256), Convention::MacAsOne).unwrap();
    let (dp, df) = r.delta(&REFERENCE_MFENNET);
    assert!(dp.abs() <= 0.10, "params {} delta {dp}", r.total_params);
    assert!(df.abs() <= 0.15, "flops {} delta {df}", r.total_flops);
}

#[test]
fn default_depths_are_the_search_optimum() {
    let t = tune_depths(&ModelConfig::default(), &REFERENCE_MFENNET, input(256), 4).unwrap();
    assert_eq!(t.blocks_per_stage, TUNED_BLOCKS_PER_STAGE.to_vec());
}

#[test]
fn per_block_parameter_formula() {
    let base = ModelConfig::default().with_blocks(&[0; 5]);
    let one = base.clone().with_blocks(&[1, 0, 0, 0, 0]);
    let a = count_params(&ModelGraph::mfennet(&base).unwrap());
    let b = count_params(&ModelGraph::mfennet(&one).unwrap());
    let c = 32u64;
    assert_eq!(b - a, 8 * c * c + 9 * c);
}

#[test]
fn report_is_pure_and_totals_agree() {
    let g = ModelGraph::mfennet(&ModelConfig::default()).unwrap();
    let a = report(&g, input(256), Convention::MacAsOne).unwrap();
    let b = report(&g, input(256), Convention::MacAsOne).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.total_params, count_params(&g));
    assert_eq!(a.total_flops, count_flops(&g, input(256), Convention::MacAsOne).unwrap());
    let table = a.to_table();
    assert!(table.contains(&format!("Params (M) {:.2}", a.params_m())), "{table}");
    assert!(table.contains(&format!("FLOPs (G) {:.2}", a.flops_g())), "{table}");
}

#[test]
fn analytic_costs_match_executed_ops() {
    let cfg = ModelConfig {
        stage_widths: vec![4, 8, 8, 16, 16],
        blocks_per_stage: vec![1, 2, 0, 1, 1],
        spp_bins: vec![1, 2],
        mixer_subtract_input: true,
        ..Default::default()
    };
    for graph in [
        ModelGraph::mfennet(&cfg).unwrap(),
        ModelGraph::unet(&UNetConfig {
            widths: vec![4, 8, 8, 16, 16],
            ..Default::default()
        })
        .unwrap(),
    ] {
        let shape = Shape4::new(2, 3, 32, 48);
        let r = report(&graph, shape, Convention::MacAsOne).unwrap();
        let model = Model::<f32>::new(graph, 1);
        let mut tape = Tape::new();
        let x = tape.input(Tensor4::full(shape, 0.25));
        model.forward(&mut tape, x).unwrap();
        assert_eq!(totals_by_kind(&r.rows), executed_by_kind(tape.costs()));
    }
}

#[test]
fn unet_flops_scale_by_four() {
    let g = ModelGraph::unet(&UNetConfig::default()).unwrap();
    let small = count_flops(&g, input(128), Convention::MacAsOne).unwrap();
    let large = count_flops(&g, input(256), Convention::MacAsOne).unwrap();
    assert_eq!(4 * small, large);
}

#[test]
fn degenerate_depths_count() {
    let g = ModelGraph::mfennet(&ModelConfig::default().with_blocks(&[0; 5])).unwrap();
    assert_eq!(count_params(&g), manifest_count(&g.manifest()));
    assert_eq!(
        g.count_metaformer_blocks(|_| true),
        0,
        "no blocks expected for all-zero depths"
    );
}

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (
        prop::collection::vec(1usize..=24, 5),
        prop::collection::vec(0usize..=3, 5),
        prop::sample::select(vec![1usize, 3, 5]),
        1usize..=4,
        prop::sample::select(vec![vec![1], vec![1, 2], vec![1, 2, 3, 6]]),
        any::<bool>(),
    )
        .prop_map(|(mut widths, blocks, kernel, ratio, bins, sub)| {
            let n = bins.len();
            widths[4] = widths[4].div_ceil(n) * n;
            ModelConfig {
                stage_widths: widths,
                blocks_per_stage: blocks,
                mixer_kernel: kernel,
                ffn_ratio: ratio,
                spp_bins: bins,
                mixer_subtract_input: sub,
                ..Default::default()
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn params_equal_manifest_sum(cfg in arb_config()) {
        let g = ModelGraph::mfennet(&cfg).unwrap();
        prop_assert_eq!(count_params(&g), manifest_count(&g.manifest()));
        let model = Model::<f32>::new(g.clone(), 0);
        prop_assert_eq!(model.params().numel() as u64, count_params(&g));
    }

    #[test]
    fn conv_flops_scale_by_four_without_pyramid(cfg in arb_config(), side in 6usize..=10) {
        let cfg = ModelConfig { spp_bins: vec![1], ..cfg };
        let g = ModelGraph::mfennet(&cfg).unwrap();
        let a = report(&g, input(16 * side), Convention::MacAsTwo).unwrap();
        let b = report(&g, input(32 * side), Convention::MacAsTwo).unwrap();
        // everything but the bin-limited pyramid branches scales exactly
        let scaled = |r: &mfennet::complexity::CostReport| -> u64 {
            r.rows.iter().filter(|x| !x.name.contains(".branch")).map(|x| x.flops).sum()
        };
        prop_assert_eq!(4 * scaled(&a), scaled(&b));
    }
}
