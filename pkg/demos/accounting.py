"""Print parameters, decoder storage and receptive field for all eight variants.

    python3 demos/accounting.py [num_classes]
"""

import sys

from segdecode import VariantKind, build_variant, count_params, receptive_field, storage_cost


def main(k=11):
    print(f"receptive field of a 4-stage, 7x7 encoder: {receptive_field(4, 7)} px\n")
    print(f"{'variant':<40}{'params':>10}{'storage':>9}{'index bytes':>13}{'map bytes':>12}")
    for kind in VariantKind:
        spec = build_variant(kind, k)
        st = storage_cost(spec, 360, 480)
        print(f"{kind.value:<40}{count_params(spec):>10,}{st.multiplier_label:>9}"
              f"{st.bytes_indices:>13,}{st.bytes_encoder_maps:>12,}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 11)
