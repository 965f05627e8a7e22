mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sead_core::data::{gen_synthetic, ExampleRecord};
use sead_core::noising::{
    apply_infilling, erode, make_instance, nl_entity_spans, shuffle_entities, sql_entity_spans, Direction,
    NoiseConfig, TrainingInstance, TO_NL, TO_SQL,
};
use sead_core::sql::{is_column_entity, render_query, serialize_schema, serialize_sql, ColumnRef};

fn multiset(t: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for x in t {
        *m.entry(x.as_str()).or_insert(0) += 1;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn erosion_remaps_or_masks_every_reference(seed in any::<u64>(), p_drop in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = common::random_schema(&mut rng, 8);
        let q = common::random_query(&mut rng, &schema, 0.0);
        let e = erode(&schema, &q, p_drop, 0.0, None, &mut rng);
        for (old, new) in q.column_refs().zip(e.modified_query.column_refs()) {
            let ColumnRef::Index(i) = old else { unreachable!() };
            match e.index_map[i] {
                Some(j) => {
                    prop_assert_eq!(new, ColumnRef::Index(j));
                    prop_assert_eq!(&e.eroded_schema.columns()[j].name, &schema.columns()[i].name);
                }
                None => prop_assert_eq!(new, ColumnRef::Unknown),
            }
        }
        let mut targets: Vec<usize> = e.index_map.iter().flatten().copied().collect();
        let n = targets.len();
        targets.sort();
        targets.dedup();
        prop_assert_eq!(targets.len(), n);
        prop_assert_eq!(e.modified_sql, render_query(&e.modified_query));
    }

    #[test]
    fn shuffle_preserves_multiset_and_context_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = common::random_schema(&mut rng, 6);
        let q = common::random_query(&mut rng, &schema, 0.1);
        let toks = render_query(&q);
        let out = shuffle_entities(&toks, &sql_entity_spans(&toks), &mut rng);
        prop_assert_eq!(multiset(&toks), multiset(&out));
        let rest = |t: &[String]| t.iter().filter(|x| !is_column_entity(x)).cloned().collect::<Vec<_>>();
        prop_assert_eq!(rest(&toks), rest(&out));
    }

    #[test]
    fn nl_shuffle_keeps_non_entity_tokens_in_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = common::random_schema(&mut rng, 5);
        let mut question: Vec<String> = Vec::new();
        for c in schema.columns() {
            question.push(common::word(&mut rng));
            question.extend(c.name_tokens());
        }
        let spans = nl_entity_spans(&question, &schema, None);
        let out = shuffle_entities(&question, &spans, &mut rng);
        prop_assert_eq!(multiset(&question), multiset(&out));
        let inside = |i: usize| spans.iter().any(|&(s, e)| s <= i && i < e);
        let rest: Vec<&String> = question.iter().enumerate().filter(|(i, _)| !inside(*i)).map(|(_, t)| t).collect();
        let out_spans = nl_entity_spans(&out, &schema, None);
        let out_inside = |i: usize| out_spans.iter().any(|&(s, e)| s <= i && i < e);
        let out_rest: Vec<&String> = out.iter().enumerate().filter(|(i, _)| !out_inside(*i)).map(|(_, t)| t).collect();
        prop_assert_eq!(rest, out_rest);
    }

    #[test]
    fn infilling_never_lengthens(seed in any::<u64>(), n in 1usize..60, rate in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toks: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let out = apply_infilling(&toks, rate, 3.0, &mut rng);
        prop_assert!(out.len() <= toks.len());
        prop_assert_eq!(apply_infilling(&toks, 0.0, 3.0, &mut rng), toks.clone());
        let mut a = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(apply_infilling(&toks, rate, 3.0, &mut a), apply_infilling(&toks, rate, 3.0, &mut b));
    }
}

fn corpus() -> (sead_core::data::TableStore, Vec<ExampleRecord>) {
    let (t, c) = gen_synthetic(5, 6, 60);
    (t, c.records)
}

fn instance(r: &ExampleRecord, tables: &sead_core::data::TableStore, cfg: &NoiseConfig, seed: u64) -> TrainingInstance {
    let schema = tables.get(&r.table_id).unwrap().schema();
    make_instance(r, &schema, cfg, Some(tables), &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn instances_carry_prefix_and_trailing_schema() {
    let (tables, recs) = corpus();
    let cfg = NoiseConfig { p_shuffle: 0.6, ..Default::default() };
    for (i, r) in recs.iter().enumerate() {
        let inst = instance(r, &tables, &cfg, i as u64);
        let prefix = if inst.direction == Direction::ToSql { TO_SQL } else { TO_NL };
        assert_eq!(inst.source[0], prefix);
        let first_sep = inst.source.iter().position(|t| t == "<col0>");
        if let Some(p) = first_sep {
            let tail = &inst.source[p..];
            assert!(tail.iter().filter(|t| t.starts_with("<col")).count() >= 1);
        }
    }
}

#[test]
fn zero_noise_is_plain_formulation() {
    let (tables, recs) = corpus();
    for (i, r) in recs.iter().enumerate() {
        let schema = tables.get(&r.table_id).unwrap().schema();
        let inst = instance(r, &tables, &NoiseConfig::none(), i as u64);
        assert_eq!(inst.direction, Direction::ToSql);
        assert_eq!(inst.source, TrainingInstance::inference(&r.question_tokens(), &schema));
        assert_eq!(inst.target, serialize_sql(&r.gold, &schema).unwrap());
        assert!(inst.source.ends_with(&serialize_schema(&schema)));
    }
}

#[test]
fn same_seed_same_instance() {
    let (tables, recs) = corpus();
    let cfg = NoiseConfig { p_shuffle: 0.5, infilling_enabled: true, ..Default::default() };
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(instance(r, &tables, &cfg, i as u64), instance(r, &tables, &cfg, i as u64));
    }
}
