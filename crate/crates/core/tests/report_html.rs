use suscept::estimators::{token_keys, PerTokenEstimate, TokenSusceptibility};
use suscept::patterns::TokenDecoder;
use suscept::report::{
    color_for_susceptibility, per_token_csv, render_context_html, render_top_contexts, select_extremes, Scheme,
};

fn decoder() -> TokenDecoder {
    TokenDecoder::new(
        ["<|endoftext|>", " the", "<script>", " cat", "&", " sat", "\"q\"", " on"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )
}

fn estimate(component: &str, contexts: &[Vec<u32>], value: impl Fn(usize) -> f64) -> PerTokenEstimate {
    PerTokenEstimate {
        component: component.into(),
        dataset: "probe".into(),
        tokens: token_keys(contexts)
            .into_iter()
            .enumerate()
            .map(|(i, key)| TokenSusceptibility {
                key,
                value: value(i),
                std_error: None,
            })
            .collect(),
        chain_means: vec![],
    }
}

#[test]
fn alpha_is_monotone_and_hue_follows_sign() {
    for scheme in [Scheme::Quadratic, Scheme::Linear] {
        let m = 3.7;
        let mut last = -1.0;
        for i in 0..100 {
            let chi = m * i as f64 / 99.0;
            let pos = color_for_susceptibility(chi, m, scheme).unwrap();
            let neg = color_for_susceptibility(-chi, m, scheme).unwrap();
            assert!(pos.alpha >= last);
            assert_eq!(pos.alpha, neg.alpha);
            assert_eq!((pos.r, pos.b), (0, 0));
            if chi > 0.0 {
                assert_eq!((neg.r, neg.g, neg.b), (255, 0, 0));
            }
            last = pos.alpha;
        }
        assert_eq!(last, 1.0);
    }
}

#[test]
fn zero_is_transparent() {
    let ctx = vec![vec![0, 3]];
    let e = estimate("0:0", &ctx, |_| 0.0);
    let html = render_context_html(&ctx, &[e], &["0:0".into()], Scheme::Quadratic, &decoder()).unwrap();
    assert!(html.contains("background:rgba(0,255,0,0.0000)"), "{html}");
}

fn three() -> (Vec<Vec<u32>>, Vec<PerTokenEstimate>, Vec<String>) {
    let ctx = vec![vec![0, 1, 2, 3, 4], vec![0, 5, 6, 7]];
    let comps: Vec<String> = ["1:2", "0:0", "1:7"].iter().map(|s| s.to_string()).collect();
    let ests = comps
        .iter()
        .enumerate()
        .map(|(c, name)| estimate(name, &ctx, |i| (i as f64 - 3.0) * (c as f64 + 1.0)))
        .collect();
    (ctx, ests, comps)
}

#[test]
fn stacked_bars_follow_component_order() {
    let (ctx, ests, comps) = three();
    let html = render_context_html(&ctx, &ests, &comps, Scheme::Linear, &decoder()).unwrap();
    let tokens = html.matches("<span class=\"t\"").count();
    assert_eq!(tokens, 9);
    assert_eq!(html.matches("<span class=\"b\"").count(), 7 * 3);
    let first = html.find("title=\"context 0 position 1;").unwrap();
    let title = &html[first..first + html[first..].find("\">").unwrap()];
    let (a, b, c) = (title.find("1:2").unwrap(), title.find("0:0").unwrap(), title.find("1:7").unwrap());
    assert!(a < b && b < c, "{title}");
    assert_eq!(html, render_context_html(&ctx, &ests, &comps, Scheme::Linear, &decoder()).unwrap());
}

#[test]
fn token_text_is_escaped() {
    let (ctx, ests, comps) = three();
    let html = render_context_html(&ctx, &ests, &comps, Scheme::Quadratic, &decoder()).unwrap();
    assert!(!html.contains("<script>"));
    assert!(html.contains("&lt;script&gt;"));
    assert!(html.contains("&quot;q&quot;"));
    assert!(html.contains(">&amp;<"));
}

#[test]
fn coverage_mismatch_is_an_error() {
    let (ctx, mut ests, comps) = three();
    ests[1].tokens.pop();
    assert!(render_context_html(&ctx, &ests, &comps, Scheme::Quadratic, &decoder()).is_err());
    assert!(render_context_html(&ctx, &ests[..2], &comps, Scheme::Quadratic, &decoder()).is_err());
}

fn featured_values(section: &str) -> Vec<f64> {
    section
        .split("data-value=\"")
        .skip(1)
        .map(|s| s[..s.find('"').unwrap()].parse().unwrap())
        .collect()
}

#[test]
fn top_contexts_order_and_windows() {
    let ctx = vec![vec![0, 1, 2, 3, 4, 5, 6, 7], vec![0, 7, 6, 5, 4, 3, 2, 1]];
    let e = estimate("1:3", &ctx, |i| ((i * 5) % 14) as f64 - 6.5);
    let d = decoder();

    let one = render_top_contexts(&e, &ctx, &d, Scheme::Quadratic, 200, 1).unwrap();
    assert_eq!(one.matches("class=\"ctx\"").count(), 2);
    assert_eq!(featured_values(&one).len(), 2);
    // window 200 on an 8-token context shows the whole context
    let first_ctx = &one[one.find("class=\"ctx\"").unwrap()..];
    let first_ctx = &first_ctx[..first_ctx.find("</div>\n").unwrap()];
    assert_eq!(first_ctx.matches("class=\"t").count(), 8);

    let html = render_top_contexts(&e, &ctx, &d, Scheme::Quadratic, 2, 4).unwrap();
    let split = html.find("<h2>lowest</h2>").unwrap();
    let top = featured_values(&html[..split]);
    assert_eq!(top.len(), 4);
    assert!(top.windows(2).all(|w| w[0] > w[1]), "{top:?}");
    let (hi, lo) = select_extremes(&e, 4).unwrap();
    assert_eq!(top, hi.iter().map(|t| t.value).collect::<Vec<_>>());
    assert_eq!(featured_values(&html[split..]), lo.iter().map(|t| t.value).collect::<Vec<_>>());

    assert!(render_top_contexts(&e, &ctx, &d, Scheme::Quadratic, 2, 0).is_err());
    assert!(render_top_contexts(&e, &ctx, &d, Scheme::Quadratic, 2, 15).is_err());
    let empty = PerTokenEstimate {
        tokens: vec![],
        ..e.clone()
    };
    assert!(render_top_contexts(&empty, &ctx, &d, Scheme::Quadratic, 2, 1).is_err());
}

#[test]
fn csv_lists_every_token() {
    let (_, ests, _) = three();
    let csv = per_token_csv(&ests);
    assert_eq!(csv.lines().count(), 1 + 3 * 7);
    assert!(csv.starts_with("dataset,context,position,token,component,chi\n"));
}
