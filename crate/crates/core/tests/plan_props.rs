use proptest::prelude::*;
use tpshift::model::{presets, ModelConfig};
use tpshift::transform_engine::{
    build_plan, CostModel, Direction, GroupSpec, Phase, TransformOptions,
};

fn pair() -> impl Strategy<Value = (usize, usize)> {
    prop_oneof![
        Just((1, 2)),
        Just((1, 4)),
        Just((2, 4)),
        Just((4, 1)),
        Just((2, 1)),
        Just((4, 2))
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_are_reverse_ordered(layers in 1usize..=128, (from, to) in pair(), stagger in 1usize..=6, tokens in 1u64..200) {
        let model = ModelConfig { num_layers: layers, ..presets::llama3_8b() };
        let n = if to > from { to / from } else { 1 };
        let group = GroupSpec {
            tp_from: from,
            tp_to: to,
            instances: (0..n).map(|i| vec![(i as u64, tokens)]).collect(),
            ..Default::default()
        };
        let opts = TransformOptions { stagger_width: stagger, ..Default::default() };
        let plan = build_plan(&group, &model, &CostModel::default(), &opts).unwrap();
        prop_assert_eq!(plan.steps.len(), 2 * layers);
        for (k, pair) in plan.steps.chunks(2).enumerate() {
            prop_assert_eq!(pair[0].layer, layers - 1 - k);
            prop_assert_eq!(pair[1].layer, layers - 1 - k);
            prop_assert_eq!(pair[0].earliest_step, k / stagger);
            if plan.direction == Direction::ScaleUp {
                prop_assert_eq!((pair[0].phase, pair[1].phase), (Phase::Mlp, Phase::Kv));
            }
        }
        prop_assert_eq!(plan.span_steps(), layers.div_ceil(stagger));
        prop_assert!(plan.check_order().is_ok());
    }
}
