from setuptools import setup

setup(
    name="kgstream",
    version="0.1.0",
    packages=["kgstream"],
    package_dir={"": "src"},
    entry_points={"console_scripts": ["kgstream = kgstream.__main__:main"]},
    install_requires=[
        "pyyaml",
        "pint",
        "rich",
        "networkx",
        "pyarrow",
        "numpy",
    ],
    extras_require={"test": ["pytest"]},
    package_data = {
        "kgstream": ["default.rules"]
    },
    include_package_data=True,
)
