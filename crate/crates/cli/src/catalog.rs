//! Built-in model families.

pub const FAMILIES: [&str; 3] = ["yule", "finite_type", "house_of_cards"];

pub fn list_models() -> String {
    let mut out = String::new();
    out.push_str("yule            single-type binary fission at rate b\n");
    out.push_str("finite_type     multitype branching with per-type rates, offspring laws and type kernels\n");
    out.push_str("house_of_cards  selection alpha(x) on [0,1] plus uniform mutation at rate 1\n");
    out
}

pub fn describe_model(name: &str) -> Option<String> {
    let text = match name {
        "yule" => {
            "yule: single-type binary fission\n\
             \n\
             [model]\n\
             kind = \"yule\"\n\
             b = 1.0                 # fission rate, > 0 (default 1)\n\
             \n\
             Eigen-elements: lambda = b, h = 1, gamma = 1.\n\
             W is Exponential(1); the semigroup is rank one, so the raw gap is infinite.\n"
        }
        "finite_type" => {
            "finite_type: multitype branching on types 0..d-1\n\
             \n\
             [model]\n\
             kind = \"finite_type\"\n\
             \n\
             [[model.channels]]      # one table per independent event channel\n\
             name = \"fission\"        # optional\n\
             rates = [r_0, ..., r_{d-1}]\n\
             offspring = [[p_0, p_1, ...]]   # one law shared by all types, or one per type\n\
             kernel = [[...], ...]   # optional d x d stochastic matrix for children's types;\n\
             \x20                       # children keep the parent's type when omitted\n\
             \n\
             Conditions: rows of kernels sum to 1, offspring laws are probability vectors,\n\
             the mean matrix is irreducible with a simple real dominant eigenvalue lambda > 0.\n"
        }
        "house_of_cards" => {
            "house_of_cards: traits in [0,1], constant between events\n\
             \n\
             [model]\n\
             kind = \"house_of_cards\"\n\
             alpha = \"x\"             # selection function of x\n\
             # optional explicit realization of alpha = -rate * sum_k (k-1) p_k:\n\
             # [model.realization]\n\
             # rate = \"...\"\n\
             # offspring = [\"p_0(x)\", \"p_1(x)\", ...]\n\
             \n\
             Mutation: at rate 1 a particle produces one child with a Uniform[0,1] trait.\n\
             Selection: by default pure death at rate alpha where alpha > 0 and binary\n\
             fission at rate -alpha where alpha < 0.\n\
             \n\
             Conditions on alpha:\n\
             \x20 selection  alpha(x) >= alpha(0) for x in (0,1] (equality only for constant alpha)\n\
             \x20 integral   int_0^1 dx / (alpha(x) - alpha(0)) > 1\n\
             \n\
             lambda solves int_0^1 dx / (lambda + alpha(x)) = 1, h is proportional to\n\
             1/(lambda + alpha), gamma has density proportional to 1/(lambda + alpha),\n\
             and the gap is lambda + alpha(0). Critical when lambda = -2 alpha(0).\n"
        }
        _ => return None,
    };
    Some(text.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_lists_three_families() {
        let list = list_models();
        assert_eq!(list.lines().count(), 3);
        for name in FAMILIES {
            assert!(list.contains(name));
            assert!(describe_model(name).unwrap().starts_with(name));
        }
    }

    #[test]
    fn hoc_description_states_both_conditions() {
        let d = describe_model("house_of_cards").unwrap();
        assert!(d.contains("alpha(x) >= alpha(0)"));
        assert!(d.contains("int_0^1 dx / (alpha(x) - alpha(0)) > 1"));
        assert!(describe_model("ising").is_none());
    }
}
