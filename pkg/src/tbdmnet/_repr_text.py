def format_row(widths, *args) -> str:
    return (
        "".join(
            ("│{0:^%i}" % w if w > 0 else "│ {0:%i}" % (-w - 1)).format(a)
            for (w, a) in zip(widths, args)
        )
        + "│"
    )


def format_line(widths, edges):
    s = edges[0]
    for w, e in zip(widths, edges[1:]):
        s += "─" * abs(w)
        s += e
    return s


def score(x):
    return "" if x is None else f"{x:.2f}"


def confusion(cm):
    names = tuple(str(x) for x in cm.labels)
    n = len(names)
    if n == 0:
        return "<empty confusion matrix>"
    nums = matrix_format(cm.flatten())

    def row_fmt(args):
        s = "│ " + args[0] + " │"
        for x in args[1:]:
            s += " " + x
        s += " │"
        return s

    first_row_width = max(len(v) for v in names)
    row_width = max(max(len(v) for v in names), max(len(v) for v in nums))
    v_names = [("{:>%is}" % first_row_width).format(x) for x in names]
    h_names = [("{:>%is}" % row_width).format(x) for x in names]
    val_fmt = ("{:>%is}" % row_width).format

    w = (first_row_width + 2, (row_width + 1) * n + 1)
    l1 = format_line(w, "┌┬┐")
    l2 = format_line(w, "├┼┤")
    l3 = format_line(w, "└┴┘")

    header = row_fmt([" " * first_row_width] + h_names)
    lines = [l1, header, l2]

    for i, vn in enumerate(v_names):
        lines.append(row_fmt([vn] + [val_fmt(nums[n * i + j]) for j in range(n)]))
    lines.append(l3)
    return "\n".join(lines)


def matrix_format(values):
    return [str(int(v)) for v in values]


def report(rep, ref=None):
    title = f"{rep.dataset or 'unnamed'} {rep.tag or 'tbdm'} ({rep.checkpoint_kind})"
    ws = (-11, 9, 9, 9)
    total = sum(abs(w) for w in ws) + len(ws) - 1
    l1 = format_line((total,), "┌┐")
    t1 = format_row((total,), title)
    t2 = format_row((total,), f"config {rep.model_config_hash}")
    l2 = format_line(ws, "├┬┬┬┤")
    h = format_row(ws, "Fold", "UAR", "WAR", "F1")
    l3 = format_line(ws, "├┼┼┼┤")
    lines = [l1, t1, t2, l2, h, l3]
    for f in rep.folds:
        lines.append(format_row(ws, str(f.fold), score(f.uar), score(f.war), score(f.f1)))
    if rep.folds:
        m = rep.mean
        lines.append(l3)
        lines.append(format_row(ws, "Mean", score(m["uar"]), score(m["war"]), score(m["f1"])))
    if ref is not None:
        lines.append(format_row(ws, "Reference", *(score(x) for x in ref)))
    lines.append(format_line(ws, "└┴┴┴┘"))
    return "\n".join(lines)


def results(rows):
    """Render (dataset, model, uar, war, f1) rows grouped by dataset."""
    name_width = max([7] + [len(r[0]) for r in rows])
    model_width = max([5] + [len(r[1]) for r in rows])
    ws = (-name_width - 2, -model_width - 2, 9, 9, 9)
    h = format_row(ws, "Dataset", "Model", "UAR", "WAR", "F1")
    l1 = format_line(ws, "┌┬┬┬┬┐")
    l2 = format_line(ws, "├┼┼┼┼┤")
    lines = [l1, h]
    previous = None
    for dataset, model, uar, war, f1 in rows:
        if dataset != previous:
            lines.append(l2)
        lines.append(
            format_row(
                ws,
                dataset if dataset != previous else "",
                model,
                score(uar),
                score(war),
                score(f1),
            )
        )
        previous = dataset
    lines.append(format_line(ws, "└┴┴┴┴┘"))
    return "\n".join(lines)
