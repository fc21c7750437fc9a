use proptest::prelude::*;

use regattn_core::layout_file::{masks_from_rle, masks_to_rle, LayoutFile};
use regattn_core::region::{
    build_alignment, parse_annotated_prompt, rescale_mask, whitespace_token_spans, LayerRegions,
    Mask, Region, RegionLayout,
};

fn binary_mask() -> impl Strategy<Value = Mask> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0)], h * w)
            .prop_map(move |data| Mask::new(h, w, data).unwrap())
    })
}

/// A partition of an `h × w` grid into `r` regions by pixel labels.
fn partition() -> impl Strategy<Value = RegionLayout> {
    (1usize..10, 1usize..10, 1usize..5).prop_flat_map(|(h, w, r)| {
        proptest::collection::vec(0..r, h * w).prop_map(move |labels| {
            let regions = (0..r)
                .map(|i| Region {
                    id: i + 1,
                    tag: format!("R{i}"),
                    mask: Mask::new(
                        h,
                        w,
                        labels.iter().map(|&l| (l == i) as u8 as f64).collect(),
                    )
                    .unwrap(),
                })
                .collect();
            RegionLayout::new(h, w, regions, true).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn rle_round_trips(mask in binary_mask()) {
        let rows = mask.to_rle_rows();
        let back = Mask::from_rle_rows(mask.height(), mask.width(), &rows).unwrap();
        prop_assert_eq!(back, mask);
    }

    #[test]
    fn layout_rle_text_round_trips(layout in partition()) {
        let text = masks_to_rle(&layout);
        prop_assert_eq!(masks_from_rle(&text, true).unwrap(), layout.clone());
        let file = LayoutFile::from_layout(&layout);
        prop_assert_eq!(LayoutFile::from_json(&file.to_json()).unwrap().to_layout().unwrap(), layout);
    }

    #[test]
    fn rescale_stays_in_unit_range(mask in binary_mask(), th in 1usize..20, tw in 1usize..20) {
        let out = rescale_mask(&mask, th, tw).unwrap();
        prop_assert_eq!((out.height(), out.width()), (th, tw));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rescale_preserves_constants(h in 1usize..10, w in 1usize..10, th in 1usize..20, tw in 1usize..20, c in 0.0f64..=1.0) {
        let out = rescale_mask(&Mask::filled(h, w, c).unwrap(), th, tw).unwrap();
        prop_assert!(out.data().iter().all(|v| (v - c).abs() <= 1e-12));
    }

    #[test]
    fn fractions_sum_to_one_on_partitions(layout in partition()) {
        let total: f64 = layout.fractions().as_slice()[1..].iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn pixel_region_is_the_covering_region(layout in partition()) {
        let layer = LayerRegions::from_layout(&layout, layout.height(), layout.width()).unwrap();
        for p in 0..layer.hw() {
            let r = layer.pixel_region(p);
            prop_assert!(r >= 1);
            prop_assert_eq!(layer.value(r, p), 1.0);
        }
    }

    #[test]
    fn alignment_follows_annotations(words in proptest::collection::vec("[a-z]{1,6}", 1..8), tagged in proptest::collection::vec(any::<bool>(), 8)) {
        let raw: Vec<String> = words
            .iter()
            .enumerate()
            .map(|(i, w)| if tagged[i] { format!("{{{w}:T{i}}}") } else { w.clone() })
            .collect();
        let prompt = parse_annotated_prompt(&raw.join(" ")).unwrap();
        prop_assert_eq!(&prompt.plain, &words.join(" "));
        let tags = (0..words.len()).filter(|&i| tagged[i]).enumerate().map(|(k, i)| (format!("T{i}"), k + 1)).collect();
        let alignment = build_alignment(&prompt, &whitespace_token_spans(&prompt.plain), &tags).unwrap();
        let mut next = 0;
        for (i, &r) in alignment.assignment().iter().enumerate() {
            if tagged[i] {
                next += 1;
                prop_assert_eq!(r, next);
            } else {
                prop_assert_eq!(r, 0);
            }
        }
    }
}

#[test]
fn rejects_overlapping_partition() {
    let full = Mask::filled(2, 2, 1.0).unwrap();
    let regions = vec![
        Region {
            id: 1,
            tag: "A".into(),
            mask: full.clone(),
        },
        Region {
            id: 2,
            tag: "B".into(),
            mask: full,
        },
    ];
    assert!(RegionLayout::new(2, 2, regions.clone(), true).is_err());
    assert!(RegionLayout::new(2, 2, regions, false).is_ok());
}

#[test]
fn rejects_bad_annotation() {
    for raw in ["a {b:T", "a {:T}", "a {b:}", "{a:T} }", "{{a:T}:U}"] {
        assert!(parse_annotated_prompt(raw).is_err(), "{raw}");
    }
}
