use adaptkit::adapter::resolve_bottleneck;
use adaptkit::*;
use proptest::prelude::*;

fn config_strategy() -> impl Strategy<Value = AdapterConfig> {
    (
        1usize..40,
        prop::sample::select(vec![Activation::Relu, Activation::Gelu, Activation::Swish, Activation::Tanh]),
        any::<(bool, bool)>(),
        any::<(bool, bool)>(),
        any::<(bool, bool)>(),
    )
        .prop_filter_map("needs an insertion point", |(rf, act, (mh, out), (lb, la), (inp, res))| {
            (mh || out).then_some(AdapterConfig {
                reduction_factor: rf,
                non_linearity: act,
                mh_adapter: mh,
                output_adapter: out,
                new_ln_before: lb,
                new_ln_after: la,
                adapter_input: if inp { AdapterInput::SublayerOutput } else { AdapterInput::AfterOriginalLn },
                residual_source: if res { ResidualSource::AdapterInput } else { ResidualSource::PreSublayer },
            })
        })
}

fn model_strategy() -> impl Strategy<Value = ModelConfig> {
    (1usize..5, 1usize..9, 1usize..4).prop_map(|(heads, per_head, layers)| ModelConfig {
        model_type: "prop".into(),
        hidden_size: heads * per_head,
        num_layers: layers,
        num_heads: heads,
        ffn_size: 8,
        vocab_size: 16,
        max_seq_len: 8,
        layer_norm_epsilon: 1e-12,
    })
}

proptest! {
    #[test]
    fn closed_form_count_matches_enumeration(model in model_strategy(), cfg in config_strategy()) {
        let entry = AdapterEntry::new("x", AdapterType::TextTask, cfg.clone(), &model, 0);
        prop_assert_eq!(entry.num_params(), count_adapter_params(&model, &cfg));
    }

    #[test]
    fn bottleneck_is_at_least_one(hidden in 1usize..2000, rf in 1usize..3000) {
        let b = resolve_bottleneck(hidden, rf);
        prop_assert!(b.size >= 1);
        prop_assert_eq!(b.inexact, hidden % rf != 0 || hidden < rf);
    }
}

#[test]
fn pfeiffer_counts_on_base_and_large() {
    let base = ModelConfig::bert_base();
    let large = ModelConfig::bert_large();
    let count = |m: &ModelConfig, rf| count_adapter_params(m, &preset("pfeiffer").unwrap().with_reduction_factor(rf));
    assert_eq!(count(&base, 64), 230_544);
    assert_eq!(count(&base, 16), 894_528);
    assert_eq!(count(&large, 16), 3_171_840);
    // Base/2 and Large/64 come out at 7,091,712 and 811,392
    assert_eq!(count(&base, 2), 7_091_712);
    assert_eq!(count(&large, 64), 811_392);
    let rounded = |n: usize| (n as f64 / 1e5).round() / 10.0;
    assert_eq!([rounded(count(&base, 64)), rounded(count(&base, 16)), rounded(count(&base, 2))], [0.2, 0.9, 7.1]);
    assert_eq!([rounded(count(&large, 64)), rounded(count(&large, 16)), rounded(count(&large, 2))], [0.8, 3.2, 25.2]);
}

#[test]
fn houlsby_projections_double_pfeiffer() {
    for model in [ModelConfig::desk(), ModelConfig::bert_base(), ModelConfig::bert_large()] {
        for rf in [2, 16, 64] {
            let p = count_projection_params(&model, &preset("pfeiffer").unwrap().with_reduction_factor(rf));
            let h = count_projection_params(&model, &preset("houlsby").unwrap().with_reduction_factor(rf));
            assert_eq!(h, 2 * p);
        }
    }
}
