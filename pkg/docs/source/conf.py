# Configuration file for the Sphinx documentation builder.
#
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Path setup --------------------------------------------------------------

import runpy
import sys
import os

os.environ["DOCUMENTATION"] = "True"
sys.path.insert(0, os.path.abspath('../../'))
sys.path.insert(0, os.path.abspath('.'))

from sitewiz import __version__

# API reference pages are generated from the @doc_category registrations
runpy.run_path(os.path.join(os.path.dirname(__file__), "scripts", "generate_autodoc.py"))


# -- Project information -----------------------------------------------------
project = 'SiteWizard'
copyright = '2024, SiteWizard developers'
author = 'SiteWizard developers'
version = __version__


# -- General configuration ---------------------------------------------------
numfig = True

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
    "sphinx.ext.autosectionlabel",
    "sphinx.ext.intersphinx",
    "sphinx.ext.mathjax",
    "sphinx_copybutton",
    "enum_tools.autoenum",
    "sphinx_design",
    "sphinx_search.extension",
]

autosectionlabel_prefix_document = True

source_suffix = {
    '.rst': 'restructuredtext',
}

templates_path = ['_templates']
exclude_patterns = []


# Autodoc
autodoc_typehints = "signature"
autodoc_typehints_format = "short"


developement_build = os.environ.get("DOC_DEVELOPMENT", default="False") == "True"

autodoc_default_options = {
    'member-order': 'bysource',
    "private-members": developement_build
}


# Intersphinx
intersphinx_mapping = {
    "python": ("https://docs.python.org/3/", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "pandas": ("https://pandas.pydata.org/docs/", None),
}

# ----------- HTML ----------- #
html_title = project
html_theme = 'furo'
html_static_path = []
html_theme_options = {
    "navigation_with_keys": True,
    "source_directory": "docs/source",
}
