use heapmend::chunk::{layout_for_request, ALIGNMENT, HEADER_SIZE, TRAILER_SIZE};
use heapmend::impact::Interval;
use heapmend::interp::eval_arith;
use heapmend::program::ArithOp;
use proptest::prelude::*;

const OPS: [ArithOp; 6] = [
    ArithOp::Add,
    ArithOp::Sub,
    ArithOp::Mul,
    ArithOp::CmpLe,
    ArithOp::CmpLt,
    ArithOp::CmpEq,
];

fn interval_with_member() -> impl Strategy<Value = (Interval, i64)> {
    let bound = prop_oneof![any::<i64>(), -1000i64..1000];
    (bound.clone(), bound).prop_flat_map(|(x, y)| {
        let (lo, hi) = (x.min(y), x.max(y));
        (Just(Interval { lo, hi }), lo..=hi)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4096))]

    #[test]
    fn interval_arithmetic_covers_concrete_results(
        op in 0..OPS.len(),
        (a, x) in interval_with_member(),
        (b, y) in interval_with_member(),
    ) {
        let op = OPS[op];
        let out = Interval::arith(op, a, b);
        prop_assert!(out.contains(eval_arith(op, x, y)), "{op:?} {a:?} {b:?} -> {out:?}");
    }

    #[test]
    fn point_intervals_are_exact(op in 0..OPS.len(), x in -1000i64..1000, y in -1000i64..1000) {
        let op = OPS[op];
        prop_assert_eq!(Interval::arith(op, Interval::point(x), Interval::point(y)), Interval::point(eval_arith(op, x, y)));
    }

    #[test]
    fn layout_is_aligned_and_covers_request(request in 1u64..1 << 40, sensitive in any::<bool>()) {
        let layout = layout_for_request(request, sensitive).unwrap();
        prop_assert_eq!(layout.usable_size % ALIGNMENT, 0);
        prop_assert!(layout.usable_size >= request.max(16));
        prop_assert!(layout.usable_size < request.max(16) + ALIGNMENT);
        let trailer = if sensitive { TRAILER_SIZE } else { 0 };
        prop_assert_eq!(layout.footprint, HEADER_SIZE + layout.usable_size + trailer);
    }
}
