import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

package_list = setuptools.find_packages(include=["tetree", "tetree.*"])

setuptools.setup(
    name="tetree",
    version="0.1.0",
    description="Non-autoregressive multilingual translation with a tree of shared Transformer encoder layers",
    long_description=long_description,
    long_description_content_type="text/markdown",
    install_requires=[
        "numpy>=1.20",
        "pyhocon>=0.3.59",
        "pytyped-hocon>=1.0.0",
        "pytyped-json>=2.0.0",
        "pytyped-macros>=2.0.0",
        "pytyped-metrics>=2.0.0",
        "threadpoolctl>=3.0",
        "tqdm>=4.50",
    ],
    packages=package_list,
    package_data={"tetree": ["py.typed", "resources/*.json", "resources/*.conf"]},
    entry_points={"console_scripts": ["tetree=tetree.cli:entry_point"]},
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.7',
    zip_safe=False,
)
