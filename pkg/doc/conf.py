#
# tbdmnet documentation build configuration file.
#
# This file is execfile()d with the current directory set to its containing dir.
#
# All configuration values have a default; values that are commented out
# serve to show the default.

import os
from tbdmnet.version import version

# release and version are special variables used by sphinx

release = version

# on_rtd is whether we are on readthedocs.org
on_rtd = os.environ.get("READTHEDOCS", None) == "True"

# -- General configuration -----------------------------------------------------

extensions = [
    "sphinx.ext.napoleon",
    "sphinx.ext.autodoc",
    "sphinx.ext.mathjax",
    "sphinx.ext.autosummary",
]

autoclass_content = "both"
autosummary_generate = True

# The suffix of source filenames.
source_suffix = ".rst"

# The master toctree document.
master_doc = "index"

# General information about the project.
project = "tbdmnet"
copyright = "2024, the tbdmnet team"

# List of patterns, relative to source directory, that match files and
# directories to ignore when looking for source files.
exclude_patterns = ["_build"]

# If true, '()' will be appended to :func: etc. cross-reference text.
add_function_parentheses = True

# The name of the Pygments (syntax highlighting) style to use.
pygments_style = "sphinx"

# -- Options for HTML output ---------------------------------------------------

# Output file base name for HTML help builder.
htmlhelp_basename = "tbdmnetdoc"

# -- Options for LaTeX output --------------------------------------------------

latex_documents = [
    ("index", "tbdmnet.tex", "tbdmnet Documentation", "tbdmnet team", "manual")
]

# -- Options for manual page output --------------------------------------------

man_pages = [("index", "tbdmnet", "tbdmnet Documentation", ["tbdmnet team"], 1)]

if not on_rtd:
    # Import and set the theme if we're building docs locally
    import sphinx_rtd_theme

    html_theme = "sphinx_rtd_theme"
    html_theme_path = [sphinx_rtd_theme.get_html_theme_path()]
